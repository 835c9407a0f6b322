"""Complex image containers, centered orthonormal FFTs, synthetic data
generators, image metrics, and the array-container file format.

Conventions fixed here and relied on everywhere else:

* Fourier transforms are centered (DC at index ``n // 2`` on each axis)
  and orthonormally scaled, so norms are preserved exactly.
* Coil maps are normalized to unit sum-of-squares per pixel.
* Sampling masks are binary with a sampled fraction within +-10% of
  ``1 / acceleration``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContainerError

PSNR_CAP = 300.0  # finite stand-in for +inf dB (beyond the float64 rounding floor)

_CONTAINER_MAGIC = "MOLK1"
_CONTAINER_DTYPES = {"c64": "<c8", "c128": "<c16"}
_CONTAINER_ROLES = ("image", "kspace", "maps", "mask", "weights")
_HEADER_ALIGN = 64
_HEADER_MAX = 4096


def _as_complex(data, name, min_dim=2, max_dim=4):
    arr = np.asarray(data)
    if not np.iscomplexobj(arr):
        arr = arr.astype(np.complex128)
    if arr.ndim < min_dim or arr.ndim > max_dim:
        raise ValueError(f"{name}: expected {min_dim}..{max_dim} dimensions, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    return arr


@dataclass
class ComplexImage:
    """Complex-valued image of shape (H, W) or (H, W, T)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_complex(self.data, "ComplexImage", min_dim=2, max_dim=3)

    @property
    def shape(self):
        return self.data.shape

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def copy(self) -> "ComplexImage":
        return ComplexImage(self.data.copy())

    def __add__(self, other):
        if isinstance(other, ComplexImage):
            return ComplexImage(self.data + other.data)
        return ComplexImage(self.data + other)

    def __sub__(self, other):
        if isinstance(other, ComplexImage):
            return ComplexImage(self.data - other.data)
        return ComplexImage(self.data - other)

    def __mul__(self, scalar):
        return ComplexImage(self.data * scalar)

    __rmul__ = __mul__


@dataclass
class KSpaceData:
    """Multi-coil k-space measurements of shape (C, H, W) or (C, H, W, T)."""

    data: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.data = _as_complex(self.data, "KSpaceData", min_dim=3, max_dim=4)
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def shape(self):
        return self.data.shape

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __add__(self, other):
        other_data = other.data if isinstance(other, KSpaceData) else other
        return KSpaceData(self.data + other_data, noise_sigma=self.noise_sigma)

    def __sub__(self, other):
        other_data = other.data if isinstance(other, KSpaceData) else other
        return KSpaceData(self.data - other_data, noise_sigma=self.noise_sigma)


@dataclass
class CoilMaps:
    """Coil sensitivity profiles (C, H, W), unit sum-of-squares per pixel."""

    maps: np.ndarray
    smoothness: float = 0.0

    def __post_init__(self):
        self.maps = _as_complex(self.maps, "CoilMaps", min_dim=3, max_dim=3)
        sos = np.sum(np.abs(self.maps) ** 2, axis=0)
        if np.max(np.abs(sos - 1.0)) > 1e-6:
            raise ValueError("coil maps must have unit sum-of-squares per pixel")

    @property
    def ncoils(self) -> int:
        return self.maps.shape[0]


@dataclass
class SamplingMask:
    """Binary k-space sampling pattern (H, W) or (H, W, T)."""

    mask: np.ndarray
    acceleration: float = 1.0
    kind: str = "full"

    def __post_init__(self):
        arr = np.asarray(self.mask)
        if np.iscomplexobj(arr):
            if np.max(np.abs(arr.imag)) > 0:
                raise ValueError("mask entries must be real 0/1")
            arr = arr.real
        arr = arr.astype(np.float64)
        if arr.ndim not in (2, 3):
            raise ValueError("mask must be (H, W) or (H, W, T)")
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        if self.acceleration < 1.0:
            raise ValueError("acceleration must be >= 1")
        frac = arr.mean()
        target = 1.0 / self.acceleration
        if abs(frac - target) > 0.10 * target:
            raise ValueError(
                f"sampled fraction {frac:.4f} not within 10% of 1/acceleration {target:.4f}"
            )
        self.mask = arr

    @property
    def shape(self):
        return self.mask.shape


# ---------------------------------------------------------------------------
# Centered orthonormal Fourier transforms
# ---------------------------------------------------------------------------

def fft2c_raw(arr: np.ndarray, axes=(0, 1)) -> np.ndarray:
    """Centered orthonormal 2D FFT over ``axes`` (frame-by-frame for extra axes)."""
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(arr, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def ifft2c_raw(arr: np.ndarray, axes=(0, 1)) -> np.ndarray:
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(arr, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def fft2c(img: ComplexImage) -> ComplexImage:
    """Centered orthonormal 2D DFT of an image (per frame for 2D+time)."""
    return ComplexImage(fft2c_raw(img.data))


def ifft2c(ksp: ComplexImage) -> ComplexImage:
    """Exact inverse of :func:`fft2c`."""
    return ComplexImage(ifft2c_raw(ksp.data))


# ---------------------------------------------------------------------------
# Synthetic data generators
# ---------------------------------------------------------------------------

# (additive value, semi-axis a, semi-axis b, center x0, center y0, angle deg)
_SHEPP_LOGAN_ELLIPSES = [
    (2.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
]


def _normalized_grid(height, width):
    # pixel (h//2, w//2) maps to the origin; spans roughly [-1, 1)
    y = (np.arange(height) - height // 2) / (height / 2.0)
    x = (np.arange(width) - width // 2) / (width / 2.0)
    return np.meshgrid(y, x, indexing="ij")


def _smooth_phase(height, width, rng, amplitude=0.8):
    yy, xx = _normalized_grid(height, width)
    c = rng.uniform(-1.0, 1.0, size=6) * amplitude
    return c[0] + c[1] * xx + c[2] * yy + c[3] * xx * yy + c[4] * xx**2 + c[5] * yy**2


def generate_phantom(height: int, width: int, kind: str = "shepp-logan", seed: int = 0) -> ComplexImage:
    """Synthetic complex phantom with max magnitude exactly 1.

    ``shepp-logan`` is the standard 10-ellipse head phantom (normalized to
    peak 1) with a seed-dependent smooth polynomial phase; ``smooth-random``
    is a seeded superposition of smooth complex Gaussian blobs.
    """
    if height < 16 or width < 16:
        raise ValueError("phantom dimensions must be >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = _normalized_grid(height, width)
    if kind == "shepp-logan":
        mag = np.zeros((height, width))
        for value, a, b, x0, y0, ang in _SHEPP_LOGAN_ELLIPSES:
            th = np.deg2rad(ang)
            xr = (xx - x0) * np.cos(th) + (yy - y0) * np.sin(th)
            yr = -(xx - x0) * np.sin(th) + (yy - y0) * np.cos(th)
            mag[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += value
        mag = np.clip(mag, 0.0, None)
        mag /= mag.max()
    elif kind == "smooth-random":
        nblobs = rng.integers(8, 14)
        field_ = np.zeros((height, width), dtype=np.complex128)
        for _ in range(nblobs):
            cx, cy = rng.uniform(-0.7, 0.7, size=2)
            sx = rng.uniform(0.10, 0.35)
            sy = rng.uniform(0.10, 0.35)
            amp = rng.normal() + 1j * rng.normal()
            field_ += amp * np.exp(-((xx - cx) ** 2 / (2 * sx**2) + (yy - cy) ** 2 / (2 * sy**2)))
        mag = np.abs(field_)
        mag /= mag.max()
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    phase = _smooth_phase(height, width, rng)
    # pin the peak pixel to exactly 1+0j (zero phase there) so the max
    # magnitude is exactly 1.0; clamp any pixels a rounding ulp above
    peak = np.unravel_index(np.argmax(mag), mag.shape)
    data = mag * np.exp(1j * (phase - phase[peak]))
    data[peak] = mag[peak]
    for _ in range(5):
        a = np.abs(data)
        over = a > 1.0
        if not over.any():
            break
        data[over] /= a[over]
    else:
        a = np.abs(data)
        data[a > 1.0] *= 1.0 - 5e-16
    return ComplexImage(data)


def generate_coil_maps(height: int, width: int, ncoils: int, seed: int = 0) -> CoilMaps:
    """Smooth complex coil profiles: Gaussian bumps on a ring around the
    field of view with per-coil linear phase, normalized to unit
    sum-of-squares at every pixel.
    """
    if ncoils < 1:
        raise ValueError("ncoils must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = _normalized_grid(height, width)
    sigma = 0.9  # bump width in normalized FOV units (the smoothness scale)
    ring_radius = 1.1
    angle0 = rng.uniform(0.0, 2 * np.pi)
    maps = np.empty((ncoils, height, width), dtype=np.complex128)
    for c in range(ncoils):
        th = angle0 + 2 * np.pi * c / ncoils
        cx, cy = ring_radius * np.cos(th), ring_radius * np.sin(th)
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
        px, py = rng.uniform(-1.5, 1.5, size=2)
        phase = px * xx + py * yy + rng.uniform(0, 2 * np.pi)
        maps[c] = bump * np.exp(1j * phase)
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps /= sos[None]
    return CoilMaps(maps, smoothness=sigma)


def _center_block(height, width, center_fraction):
    side = int(round(center_fraction * min(height, width)))
    mask = np.zeros((height, width), dtype=bool)
    if side > 0:
        h0 = height // 2 - side // 2
        w0 = width // 2 - side // 2
        mask[h0:h0 + side, w0:w0 + side] = True
    return mask


def _kspace_radius(height, width):
    yy = np.arange(height) - height // 2
    xx = np.arange(width) - width // 2
    return np.sqrt(yy[:, None] ** 2 + xx[None, :] ** 2)


def _dart_throw(height, width, target, center, rng):
    """Variable-density Poisson-disc selection hitting ``target`` samples.

    A candidate is accepted when no already-accepted point lies within its
    exclusion radius; the radius grows linearly with k-space radius so the
    center is denser.  The base radius is bisected to land near the target
    count, then the selection is trimmed/topped up at random to hit it
    exactly (the center block is never touched).
    """
    radius = _kspace_radius(height, width)
    rmax = radius.max()
    order = rng.permutation(height * width)
    coords = np.stack(np.unravel_index(order, (height, width)), axis=1)

    def run(base):
        accepted = center.copy()
        acc_pts = np.argwhere(center)
        occupied = [tuple(p) for p in acc_pts]
        occ = set(occupied)
        for i, j in coords:
            if accepted[i, j]:
                continue
            r_excl = base * (0.5 + 1.5 * radius[i, j] / rmax)
            ri = int(np.ceil(r_excl))
            ok = True
            for di in range(-ri, ri + 1):
                for dj in range(-ri, ri + 1):
                    if di * di + dj * dj > r_excl * r_excl:
                        continue
                    if (i + di, j + dj) in occ:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                accepted[i, j] = True
                occ.add((i, j))
        return accepted

    lo, hi = 0.3, 6.0
    best = None
    for _ in range(10):
        base = 0.5 * (lo + hi)
        cand = run(base)
        n = int(cand.sum())
        if best is None or abs(n - target) < abs(int(best.sum()) - target):
            best = cand
        if n > target:
            lo = base
        else:
            hi = base
        if abs(n - target) <= max(2, int(0.02 * target)):
            break
    return best


def generate_mask(
    height: int,
    width: int,
    acceleration: float,
    kind: str = "cartesian-variable-density",
    seed: int = 0,
    center_fraction: float = 0.08,
) -> SamplingMask:
    """Binary sampling mask with an exact sample budget of
    ``round(H*W / acceleration)``: a fully-sampled central square plus
    randomly drawn outer samples.

    ``cartesian-variable-density`` draws without replacement from a Gaussian
    radial density (sigma_k = 0.25 * half-width); ``uniform`` draws with equal
    weights; ``poisson-density`` uses variable-density dart throwing;
    ``full`` (or acceleration == 1) samples everything.
    """
    if acceleration < 1.0:
        raise ValueError("acceleration must be >= 1")
    if not 0.0 <= center_fraction <= 0.5:
        raise ValueError("center_fraction must be in [0, 0.5]")
    kinds = ("cartesian-variable-density", "poisson-density", "uniform", "full")
    if kind not in kinds:
        raise ValueError(f"unknown mask kind {kind!r}")

    npix = height * width
    if kind == "full" or acceleration == 1.0:
        if acceleration > 1.05:
            raise ValueError("full mask requires acceleration ~ 1")
        return SamplingMask(np.ones((height, width)), acceleration=1.0, kind=kind)

    target = int(round(npix / acceleration))
    center = _center_block(height, width, center_fraction)
    ncenter = int(center.sum())
    if ncenter > target:
        raise ValueError(
            f"center block ({ncenter} samples) exceeds the budget ({target}) "
            f"for acceleration {acceleration}"
        )

    rng = np.random.default_rng(seed)
    remaining = target - ncenter
    outer_idx = np.flatnonzero(~center.ravel())

    if kind == "poisson-density":
        sel = _dart_throw(height, width, target, center, rng)
        n = int(sel.sum())
        if n > target:  # trim random non-center samples
            extra = np.flatnonzero(sel.ravel() & ~center.ravel())
            drop = rng.choice(extra, size=n - target, replace=False)
            sel.ravel()[drop] = False
        elif n < target:  # top up at random
            free = np.flatnonzero(~sel.ravel())
            add = rng.choice(free, size=target - n, replace=False)
            sel.ravel()[add] = True
        mask = sel
    else:
        if kind == "cartesian-variable-density":
            sigma_k = 0.25 * (min(height, width) / 2.0)
            weights = np.exp(-(_kspace_radius(height, width) ** 2) / (2 * sigma_k**2))
            w = weights.ravel()[outer_idx]
            p = w / w.sum()
        else:  # uniform
            p = None
        chosen = rng.choice(outer_idx, size=remaining, replace=False, p=p)
        mask = center.copy()
        mask.ravel()[chosen] = True

    return SamplingMask(mask.astype(np.float64), acceleration=float(acceleration), kind=kind)


def stack_masks(masks: list[SamplingMask]) -> SamplingMask:
    """Stack per-frame 2D masks into one (H, W, T) dynamic mask."""
    if not masks:
        raise ValueError("no masks to stack")
    arr = np.stack([m.mask for m in masks], axis=-1)
    return SamplingMask(arr, acceleration=masks[0].acceleration, kind=masks[0].kind)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr(x: ComplexImage, ref: ComplexImage) -> float:
    """Peak signal-to-noise ratio in dB: 20*log10(max|ref| / rms(|x - ref|)).

    Identical inputs return the finite cap ``PSNR_CAP`` (300 dB).
    """
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    peak = float(np.max(np.abs(ref.data)))
    if peak == 0.0:
        raise ValueError("reference image is identically zero")
    rmse = float(np.sqrt(np.mean(np.abs(x.data - ref.data) ** 2)))
    if rmse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * np.log10(peak / rmse))


# ---------------------------------------------------------------------------
# Array container I/O
# ---------------------------------------------------------------------------

def write_container(path, arr: np.ndarray, role: str, dtype: str = "c128", meta: dict | None = None):
    """Write one complex array: 64-byte-aligned JSON header + raw
    little-endian interleaved (real, imag) payload, row-major.
    """
    if dtype not in _CONTAINER_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if role not in _CONTAINER_ROLES:
        raise ValueError(f"unsupported role {role!r}")
    header = {"magic": _CONTAINER_MAGIC, "dtype": dtype, "shape": list(arr.shape), "role": role}
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    pad = (-len(blob)) % _HEADER_ALIGN
    payload = np.ascontiguousarray(arr.astype(_CONTAINER_DTYPES[dtype]))
    with open(path, "wb") as fh:
        fh.write(blob + b" " * pad)
        fh.write(payload.tobytes())


def read_container(path):
    """Read a container file; returns (array, role, meta dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header = None
    end = 0
    for end in range(_HEADER_ALIGN, min(len(raw), _HEADER_MAX) + 1, _HEADER_ALIGN):
        try:
            header = json.loads(raw[:end].decode("utf-8").rstrip())
        except (UnicodeDecodeError, json.JSONDecodeError):
            continue
        break
    if not isinstance(header, dict):
        raise ContainerError("malformed-header", f"no parseable JSON header in {path}")
    if header.get("magic") != _CONTAINER_MAGIC:
        raise ContainerError("unsupported-version", f"bad magic {header.get('magic')!r}")
    dtype = header.get("dtype")
    if dtype not in _CONTAINER_DTYPES:
        raise ContainerError("unsupported-version", f"unknown dtype {dtype!r}")
    shape = header.get("shape")
    role = header.get("role")
    extra = set(header) - {"magic", "dtype", "shape", "role", "meta"}
    if (
        not isinstance(shape, list)
        or not all(isinstance(s, int) and s > 0 for s in shape)
        or role not in _CONTAINER_ROLES
        or extra
    ):
        raise ContainerError("malformed-header", f"invalid header fields in {path}")
    np_dtype = np.dtype(_CONTAINER_DTYPES[dtype])
    expected = int(np.prod(shape)) * np_dtype.itemsize
    payload = raw[end:]
    if len(payload) != expected:
        raise ContainerError(
            "payload-mismatch",
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}",
        )
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    return arr.astype(np.complex128), role, header.get("meta", {})


def _item_to_container(obj):
    if isinstance(obj, ComplexImage):
        return obj.data, "image", {}
    if isinstance(obj, KSpaceData):
        return obj.data, "kspace", {"noise_sigma": obj.noise_sigma}
    if isinstance(obj, CoilMaps):
        return obj.maps, "maps", {"smoothness": obj.smoothness}
    if isinstance(obj, SamplingMask):
        return obj.mask.astype(np.complex128), "mask", {
            "acceleration": obj.acceleration,
            "kind": obj.kind,
        }
    raise TypeError(f"cannot store object of type {type(obj).__name__}")


def _container_to_item(arr, role, meta):
    if role == "image":
        return ComplexImage(arr)
    if role == "kspace":
        return KSpaceData(arr, noise_sigma=float(meta.get("noise_sigma", 0.0)))
    if role == "maps":
        return CoilMaps(arr, smoothness=float(meta.get("smoothness", 0.0)))
    if role == "mask":
        return SamplingMask(
            arr.real, acceleration=float(meta.get("acceleration", 1.0)),
            kind=meta.get("kind", "full"),
        )
    raise ContainerError("malformed-header", f"role {role!r} is not a dataset item")


def save_dataset(path, items: dict):
    """Write each named item to ``<path>/<name>.molk``."""
    os.makedirs(path, exist_ok=True)
    for name, obj in items.items():
        arr, role, meta = _item_to_container(obj)
        dtype = "c64" if role == "mask" else "c128"
        write_container(os.path.join(path, f"{name}.molk"), arr, role, dtype=dtype, meta=meta)


def load_dataset(path) -> dict:
    """Read every ``*.molk`` file under ``path`` back into typed objects."""
    items = {}
    for fname in sorted(os.listdir(path)):
        if not fname.endswith(".molk"):
            continue
        arr, role, meta = read_container(os.path.join(path, fname))
        items[fname[:-5]] = _container_to_item(arr, role, meta)
    return items
