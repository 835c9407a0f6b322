"""Imaging-layer tests: transforms against a brute-force DFT oracle,
generator contracts, metrics, and the container format."""

import json

import numpy as np
import pytest

from molkit.errors import ContainerError
from molkit.imaging import (
    PSNR_CAP,
    CoilMaps,
    ComplexImage,
    KSpaceData,
    SamplingMask,
    fft2c,
    generate_coil_maps,
    generate_mask,
    generate_phantom,
    ifft2c,
    load_dataset,
    psnr,
    read_container,
    save_dataset,
    stack_masks,
    write_container,
)


def brute_force_dft2c(x):
    """O(N^2) centered orthonormal DFT by direct summation."""
    h, w = x.shape
    ch, cw = h // 2, w // 2
    out = np.zeros((h, w), dtype=np.complex128)
    for k1 in range(h):
        for k2 in range(w):
            acc = 0.0j
            for n1 in range(h):
                for n2 in range(w):
                    ang = -2j * np.pi * (
                        (k1 - ch) * (n1 - ch) / h + (k2 - cw) * (n2 - cw) / w
                    )
                    acc += x[n1, n2] * np.exp(ang)
            out[k1, k2] = acc / np.sqrt(h * w)
    return out


def brute_force_idft2c(y):
    h, w = y.shape
    ch, cw = h // 2, w // 2
    out = np.zeros((h, w), dtype=np.complex128)
    for n1 in range(h):
        for n2 in range(w):
            acc = 0.0j
            for k1 in range(h):
                for k2 in range(w):
                    ang = 2j * np.pi * (
                        (k1 - ch) * (n1 - ch) / h + (k2 - cw) * (n2 - cw) / w
                    )
                    acc += y[k1, k2] * np.exp(ang)
            out[n1, n2] = acc / np.sqrt(h * w)
    return out


def random_image(shape, seed):
    rng = np.random.default_rng(seed)
    return ComplexImage(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


class TestFourier:
    def test_impulse_at_center(self):
        x = np.zeros((8, 8))
        x[4, 4] = 1.0
        y = fft2c(ComplexImage(x)).data
        assert np.allclose(y, 1.0 / 8.0, atol=1e-14)

    def test_zero_image(self):
        y = fft2c(ComplexImage(np.zeros((8, 8))))
        assert np.all(y.data == 0)

    def test_matches_brute_force_dft(self):
        x = random_image((4, 4), seed=1)
        expected = brute_force_dft2c(x.data)
        assert np.max(np.abs(fft2c(x).data - expected)) < 1e-10

    def test_inverse_matches_brute_force(self):
        y = random_image((4, 4), seed=2)
        expected = brute_force_idft2c(y.data)
        assert np.max(np.abs(ifft2c(y).data - expected)) < 1e-10

    def test_constant_kspace_gives_center_impulse(self):
        y = np.full((8, 8), 1.0 / 8.0, dtype=np.complex128)
        x = ifft2c(ComplexImage(y)).data
        expected = np.zeros((8, 8))
        expected[4, 4] = 1.0
        assert np.allclose(x, expected, atol=1e-14)

    @pytest.mark.parametrize("n", [4, 8, 16, 64, 15])
    def test_round_trip(self, n):
        x = random_image((n, n), seed=n)
        back = ifft2c(fft2c(x)).data
        assert np.max(np.abs(back - x.data)) < 1e-10

    @pytest.mark.parametrize("n", [4, 8, 16, 64, 15])
    def test_parseval(self, n):
        x = random_image((n, n), seed=100 + n)
        assert abs(fft2c(x).norm() - x.norm()) < 1e-6 * x.norm()

    def test_rejects_non_finite(self):
        bad = np.ones((8, 8), dtype=np.complex128)
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            fft2c(ComplexImage(bad))

    def test_2d_time_per_frame(self):
        rng = np.random.default_rng(3)
        vol = rng.standard_normal((8, 8, 3)) + 1j * rng.standard_normal((8, 8, 3))
        y = fft2c(ComplexImage(vol)).data
        for t in range(3):
            frame = fft2c(ComplexImage(vol[:, :, t])).data
            assert np.allclose(y[:, :, t], frame)


class TestPhantom:
    def test_peak_magnitude_exactly_one(self):
        img = generate_phantom(64, 64, "shepp-logan", seed=0)
        assert np.max(np.abs(img.data)) == 1.0

    def test_magnitude_in_unit_interval(self):
        for kind in ("shepp-logan", "smooth-random"):
            img = generate_phantom(64, 64, kind, seed=5)
            mag = np.abs(img.data)
            assert mag.min() >= 0.0 and mag.max() <= 1.0

    def test_deterministic(self):
        a = generate_phantom(32, 32, "smooth-random", seed=9)
        b = generate_phantom(32, 32, "smooth-random", seed=9)
        assert np.array_equal(a.data, b.data)

    def test_background_corner_is_zero(self):
        # corner (-1, -1) in normalized coordinates is outside every ellipse
        img = generate_phantom(64, 64, "shepp-logan", seed=1)
        assert abs(img.data[0, 0]) == 0.0

    def test_rejects_small_dims(self):
        with pytest.raises(ValueError):
            generate_phantom(8, 64, "shepp-logan", seed=0)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            generate_phantom(32, 32, "checkerboard", seed=0)


class TestCoilMaps:
    def test_single_coil_unit_magnitude(self):
        maps = generate_coil_maps(32, 32, 1, seed=0)
        assert np.max(np.abs(np.abs(maps.maps[0]) - 1.0)) < 1e-12

    @pytest.mark.parametrize("ncoils", [1, 4, 8, 12])
    def test_unit_sum_of_squares(self, ncoils):
        maps = generate_coil_maps(64, 64, ncoils, seed=3)
        sos = np.sum(np.abs(maps.maps) ** 2, axis=0)
        assert np.max(np.abs(sos - 1.0)) < 1e-6

    def test_smoothness(self):
        maps = generate_coil_maps(64, 64, 4, seed=1).maps
        dy = np.abs(np.diff(maps, axis=1)).max()
        dx = np.abs(np.diff(maps, axis=2)).max()
        assert max(dy, dx) < 0.1

    def test_rejects_zero_coils(self):
        with pytest.raises(ValueError):
            generate_coil_maps(32, 32, 0, seed=0)

    def test_type_enforces_normalization(self):
        with pytest.raises(ValueError):
            CoilMaps(2.0 * np.ones((2, 8, 8), dtype=np.complex128))


class TestMask:
    def test_acceleration_one_is_all_ones(self):
        mask = generate_mask(32, 32, 1.0, "cartesian-variable-density", seed=0)
        assert np.all(mask.mask == 1.0)

    def test_four_fold_sample_count(self):
        mask = generate_mask(64, 64, 4.0, "cartesian-variable-density", seed=7,
                             center_fraction=0.08)
        ones = int(mask.mask.sum())
        assert 922 <= ones <= 1126

    def test_deterministic_and_radially_decreasing(self):
        a = generate_mask(64, 64, 4.0, "cartesian-variable-density", seed=11)
        b = generate_mask(64, 64, 4.0, "cartesian-variable-density", seed=11)
        assert np.array_equal(a.mask, b.mask)
        yy, xx = np.mgrid[0:64, 0:64]
        r = np.hypot(yy - 32, xx - 32)
        edges = [0, 8, 16, 24, 33]
        densities = [
            a.mask[(r >= lo) & (r < hi)].mean() for lo, hi in zip(edges, edges[1:])
        ]
        assert all(d0 > d1 for d0, d1 in zip(densities, densities[1:]))

    @pytest.mark.parametrize("kind", ["cartesian-variable-density", "poisson-density", "uniform"])
    def test_kinds_binary_and_within_budget(self, kind):
        for seed in range(100 if kind != "poisson-density" else 5):
            mask = generate_mask(48, 48, 3.0, kind, seed=seed, center_fraction=0.1)
            vals = np.unique(mask.mask)
            assert set(vals).issubset({0.0, 1.0})
            frac = mask.mask.mean()
            assert abs(frac - 1 / 3.0) <= 0.1 / 3.0

    def test_infeasible_center_rejected(self):
        with pytest.raises(ValueError):
            generate_mask(64, 64, 20.0, "uniform", seed=0, center_fraction=0.5)

    def test_type_rejects_non_binary(self):
        with pytest.raises(ValueError):
            SamplingMask(0.5 * np.ones((8, 8)), acceleration=2.0, kind="uniform")

    def test_stacked_dynamic_mask(self):
        frames = [generate_mask(32, 32, 4.0, "uniform", seed=s) for s in range(3)]
        dyn = stack_masks(frames)
        assert dyn.shape == (32, 32, 3)
        assert not np.array_equal(dyn.mask[:, :, 0], dyn.mask[:, :, 1])


class TestPsnr:
    def test_identical_hits_cap(self):
        x = random_image((8, 8), seed=0)
        assert psnr(x, x) == PSNR_CAP

    def test_constant_offset_closed_form(self):
        ref = ComplexImage(np.ones((16, 16)))
        x = ComplexImage(np.ones((16, 16)) + 0.1)
        assert abs(psnr(x, ref) - 20.0) < 1e-12

    def test_matches_independent_computation(self):
        x = random_image((32, 32), seed=1)
        ref = random_image((32, 32), seed=2)
        expected = 20.0 * np.log10(
            np.abs(ref.data).max() / np.sqrt(np.mean(np.abs(x.data - ref.data) ** 2))
        )
        assert abs(psnr(x, ref) - expected) < 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(random_image((8, 8), 0), random_image((16, 16), 0))

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            psnr(random_image((8, 8), 0), ComplexImage(np.zeros((8, 8))))


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = ComplexImage(rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8)))
        ksp = KSpaceData(rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8)),
                         noise_sigma=0.01)
        mask = generate_mask(32, 32, 4.0, "uniform", seed=1)
        maps = generate_coil_maps(8, 8, 2, seed=2)
        save_dataset(tmp_path, {"image": img, "kspace": ksp, "mask": mask, "maps": maps})
        loaded = load_dataset(tmp_path)
        assert np.array_equal(loaded["image"].data, img.data)
        assert np.array_equal(loaded["kspace"].data, ksp.data)
        assert loaded["kspace"].noise_sigma == ksp.noise_sigma
        assert np.array_equal(loaded["mask"].mask, mask.mask)
        assert loaded["mask"].acceleration == mask.acceleration
        assert np.array_equal(loaded["maps"].maps, maps.maps)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "img.molk"
        write_container(path, np.ones((8, 8), dtype=np.complex128), "image")
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(ContainerError) as err:
            read_container(path)
        assert err.value.code == "payload-mismatch"

    def test_shape_payload_mismatch(self, tmp_path):
        # header says 8x8, payload holds 8x9
        path = tmp_path / "img.molk"
        header = json.dumps(
            {"magic": "MOLK1", "dtype": "c128", "shape": [8, 8], "role": "image"}
        ).encode()
        header += b" " * ((-len(header)) % 64)
        payload = np.ones((8, 9), dtype=np.complex128).tobytes()
        path.write_bytes(header + payload)
        with pytest.raises(ContainerError) as err:
            read_container(path)
        assert err.value.code == "payload-mismatch"

    def test_bad_magic_is_unsupported_version(self, tmp_path):
        path = tmp_path / "img.molk"
        header = json.dumps(
            {"magic": "MOLK9", "dtype": "c128", "shape": [2, 2], "role": "image"}
        ).encode()
        header += b" " * ((-len(header)) % 64)
        path.write_bytes(header + np.ones((2, 2), dtype=np.complex128).tobytes())
        with pytest.raises(ContainerError) as err:
            read_container(path)
        assert err.value.code == "unsupported-version"

    def test_garbage_header_malformed(self, tmp_path):
        path = tmp_path / "img.molk"
        path.write_bytes(b"\x00\x01not json" * 50)
        with pytest.raises(ContainerError) as err:
            read_container(path)
        assert err.value.code == "malformed-header"

    def test_payload_starts_on_64_byte_boundary(self, tmp_path):
        path = tmp_path / "img.molk"
        write_container(path, np.zeros((4, 4), dtype=np.complex128), "image")
        blob = path.read_bytes()
        assert (len(blob) - 4 * 4 * 16) % 64 == 0
