"""The multi-coil Fourier forward model A = mask o FFT o coil-weighting,
its adjoint and normal (gram) operators, and the adjoint-consistency probe.

Operators are matrix-free closures over the coil maps and mask; they are
immutable after construction and safe to apply concurrently.  With unit
sum-of-squares maps, a binary mask, and the orthonormal FFT, the operator
norm of A is at most 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import CoilMaps, ComplexImage, KSpaceData, SamplingMask, fft2c_raw, ifft2c_raw


@dataclass
class SenseModel:
    """Geometry bundle for one acquisition: coil maps + sampling mask."""

    coil_maps: CoilMaps
    mask: SamplingMask
    image_shape: tuple

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        if len(self.image_shape) not in (2, 3):
            raise ValueError("image_shape must be (H, W) or (H, W, T)")
        h, w = self.image_shape[:2]
        if self.coil_maps.maps.shape[1:] != (h, w):
            raise ValueError("coil map spatial dimensions do not match image_shape")
        m = self.mask.mask
        if m.shape != self.image_shape and m.shape != (h, w):
            raise ValueError("mask dimensions do not match image_shape")

    @property
    def ncoils(self) -> int:
        return self.coil_maps.ncoils

    @property
    def kspace_shape(self) -> tuple:
        return (self.ncoils,) + self.image_shape

    def _maps_bc(self):
        # (C, H, W) -> broadcastable against (C,) + image_shape
        maps = self.coil_maps.maps
        if len(self.image_shape) == 3:
            return maps[..., None]
        return maps

    def _mask_bc(self):
        m = self.mask.mask
        if len(self.image_shape) == 3 and m.ndim == 2:
            return m[..., None]  # static mask shared by all frames
        return m


def _check_image(x: ComplexImage, model: SenseModel):
    if x.shape != model.image_shape:
        raise ValueError(f"image shape {x.shape} does not match model {model.image_shape}")


def sense_apply(x: ComplexImage, model: SenseModel) -> KSpaceData:
    """Forward model: per coil c, mask * fft2c(S_c * x)."""
    _check_image(x, model)
    axes = (1, 2)
    coil_imgs = model._maps_bc() * x.data[None]
    ksp = fft2c_raw(coil_imgs, axes=axes)
    ksp *= model._mask_bc()[None]
    return KSpaceData(ksp)


def sense_adjoint(b: KSpaceData, model: SenseModel) -> ComplexImage:
    """Adjoint model: sum_c conj(S_c) * ifft2c(mask * b_c)."""
    if b.shape != model.kspace_shape:
        raise ValueError(f"k-space shape {b.shape} does not match model {model.kspace_shape}")
    axes = (1, 2)
    imgs = ifft2c_raw(b.data * model._mask_bc()[None], axes=axes)
    return ComplexImage(np.sum(np.conj(model._maps_bc()) * imgs, axis=0))


def gram_apply(x: ComplexImage, model: SenseModel) -> ComplexImage:
    """Normal operator A^H A, accumulated one coil at a time."""
    _check_image(x, model)
    maps = model._maps_bc()
    mask = model._mask_bc()
    out = np.zeros(model.image_shape, dtype=np.complex128)
    for c in range(model.ncoils):
        buf = fft2c_raw(maps[c] * x.data)
        buf *= mask
        out += np.conj(maps[c]) * ifft2c_raw(buf)
    return ComplexImage(out)


def adjoint_test(model: SenseModel, trials: int, seed: int = 0) -> float:
    """Max normalized adjoint defect |<Ax,y> - <x,A^H y>| / (||Ax|| ||y||)
    over random complex pairs; ~1e-15 for a correct adjoint pair.
    """
    if trials < 1:
        raise ValueError("no trials")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = ComplexImage(
            rng.standard_normal(model.image_shape) + 1j * rng.standard_normal(model.image_shape)
        )
        y = KSpaceData(
            rng.standard_normal(model.kspace_shape) + 1j * rng.standard_normal(model.kspace_shape)
        )
        ax = sense_apply(x, model)
        aty = sense_adjoint(y, model)
        lhs = np.vdot(ax.data, y.data)
        rhs = np.vdot(x.data, aty.data)
        denom = ax.norm() * y.norm()
        if denom == 0.0:
            continue
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst


def estimate_operator_norm(model: SenseModel, iters: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of ||A|| (sqrt of the top A^H A eigenvalue)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(model.image_shape) + 1j * rng.standard_normal(model.image_shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = gram_apply(ComplexImage(x), model).data
        lam = float(np.real(np.vdot(x, y)))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
    return float(np.sqrt(max(lam, 0.0)))
