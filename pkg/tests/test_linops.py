"""Forward-model tests: adjoint dot-product oracle across geometries, gram
identities under full sampling, and the ill-conditioning of undersampled
normal operators."""

import numpy as np
import pytest

from molkit.imaging import (
    ComplexImage,
    KSpaceData,
    fft2c,
    fft2c_raw,
    generate_coil_maps,
    generate_mask,
    ifft2c,
    ifft2c_raw,
    stack_masks,
)
from molkit.linops import (
    SenseModel,
    adjoint_test,
    estimate_operator_norm,
    gram_apply,
    sense_adjoint,
    sense_apply,
)


def make_model(n=16, ncoils=4, acceleration=2.0, kind="uniform", seed=0):
    maps = generate_coil_maps(n, n, ncoils, seed=seed)
    mask = generate_mask(n, n, acceleration, kind, seed=seed, center_fraction=0.1)
    return SenseModel(maps, mask, (n, n))


def full_model(n=16, ncoils=4, seed=0):
    maps = generate_coil_maps(n, n, ncoils, seed=seed)
    mask = generate_mask(n, n, 1.0, "full", seed=seed)
    return SenseModel(maps, mask, (n, n))


def rand_img(shape, seed):
    rng = np.random.default_rng(seed)
    return ComplexImage(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


class TestForward:
    def test_zero_image_zero_kspace(self):
        model = make_model()
        out = sense_apply(ComplexImage(np.zeros((16, 16))), model)
        assert np.all(out.data == 0)

    def test_single_unit_coil_full_mask_reduces_to_fft(self):
        n = 16
        maps = np.ones((1, n, n), dtype=np.complex128)
        model = SenseModel(
            __import__("molkit.imaging", fromlist=["CoilMaps"]).CoilMaps(maps),
            generate_mask(n, n, 1.0, "full"),
            (n, n),
        )
        x = rand_img((n, n), 3)
        assert np.allclose(sense_apply(x, model).data[0], fft2c(x).data)
        b = KSpaceData(rand_img((n, n), 4).data[None])
        assert np.allclose(sense_adjoint(b, model).data, ifft2c(ComplexImage(b.data[0])).data)

    def test_norm_preserved_under_full_sampling(self):
        model = full_model()
        x = rand_img((16, 16), 5)
        assert abs(sense_apply(x, model).norm() - x.norm()) < 1e-6 * x.norm()

    def test_shape_mismatch_rejected(self):
        model = make_model()
        with pytest.raises(ValueError):
            sense_apply(rand_img((8, 8), 0), model)
        with pytest.raises(ValueError):
            sense_adjoint(KSpaceData(np.zeros((2, 8, 8), dtype=complex)), model)


class TestAdjoint:
    def test_zero_kspace_zero_image(self):
        model = make_model()
        out = sense_adjoint(KSpaceData(np.zeros(model.kspace_shape, dtype=complex)), model)
        assert np.all(out.data == 0)

    def test_dot_product_identity(self):
        model = make_model(seed=2)
        x = rand_img((16, 16), 6)
        y = KSpaceData(
            np.random.default_rng(7).standard_normal(model.kspace_shape)
            + 1j * np.random.default_rng(8).standard_normal(model.kspace_shape)
        )
        lhs = np.vdot(sense_apply(x, model).data, y.data)
        rhs = np.vdot(x.data, sense_adjoint(y, model).data)
        assert abs(lhs - rhs) / (abs(lhs) + 1e-30) < 1e-10

    @pytest.mark.parametrize("n", [16, 64, 15])
    @pytest.mark.parametrize("ncoils", [1, 4, 12])
    def test_adjoint_across_geometries(self, n, ncoils):
        for kind, acc in [
            ("cartesian-variable-density", 2.0),
            ("poisson-density", 2.0),
            ("uniform", 2.0),
            ("full", 1.0),
        ]:
            maps = generate_coil_maps(n, n, ncoils, seed=n + ncoils)
            mask = generate_mask(n, n, acc, kind, seed=n, center_fraction=0.1)
            model = SenseModel(maps, mask, (n, n))
            assert adjoint_test(model, trials=5, seed=n) < 1e-10

    def test_conjugate_dropped_adjoint_is_caught(self):
        # mutation fixture: an "adjoint" that forgets to conjugate the maps
        model = make_model(seed=3)

        def broken_adjoint(b):
            imgs = ifft2c_raw(b.data * model.mask.mask[None], axes=(1, 2))
            return np.sum(model.coil_maps.maps * imgs, axis=0)

        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(20):
            x = rand_img((16, 16), rng.integers(1 << 31))
            y = KSpaceData(
                rng.standard_normal(model.kspace_shape)
                + 1j * rng.standard_normal(model.kspace_shape)
            )
            ax = sense_apply(x, model)
            lhs = np.vdot(ax.data, y.data)
            rhs = np.vdot(x.data, broken_adjoint(y))
            worst = max(worst, abs(lhs - rhs) / (ax.norm() * y.norm()))
        assert worst > 1e-2

    def test_zero_trials_rejected(self):
        with pytest.raises(ValueError, match="trials"):
            adjoint_test(make_model(), trials=0)


class TestGram:
    def test_identity_under_full_sampling(self):
        model = full_model(seed=4)
        x = rand_img((16, 16), 10)
        out = gram_apply(x, model)
        assert np.max(np.abs(out.data - x.data)) < 1e-6

    def test_zero_mask_like_behavior_on_unsampled_frequency(self):
        # single unit coil: a pure unsampled frequency is an exact null vector
        n = 16
        maps = __import__("molkit.imaging", fromlist=["CoilMaps"]).CoilMaps(
            np.ones((1, n, n), dtype=np.complex128)
        )
        mask = generate_mask(n, n, 2.0, "uniform", seed=5, center_fraction=0.1)
        model = SenseModel(maps, mask, (n, n))
        unsampled = np.argwhere(mask.mask == 0)[0]
        e = np.zeros((n, n), dtype=np.complex128)
        e[tuple(unsampled)] = 1.0
        x = ifft2c(ComplexImage(e))
        out = gram_apply(x, model)
        assert np.linalg.norm(out.data) < 1e-12

    def test_self_adjoint(self):
        model = make_model(seed=6)
        x, y = rand_img((16, 16), 11), rand_img((16, 16), 12)
        lhs = np.vdot(gram_apply(x, model).data, y.data)
        rhs = np.vdot(x.data, gram_apply(y, model).data)
        assert abs(lhs - rhs) / (abs(lhs) + 1e-30) < 1e-10

    def test_positive_semidefinite(self):
        model = make_model(seed=13)
        for seed in range(10):
            x = rand_img((16, 16), 100 + seed)
            val = np.real(np.vdot(x.data, gram_apply(x, model).data))
            assert val >= -1e-12

    def test_operator_norm_at_most_one(self):
        for seed in range(3):
            model = make_model(seed=seed)
            assert estimate_operator_norm(model, iters=40, seed=seed) <= 1.0 + 1e-3

    def test_undersampled_gram_nearly_singular(self):
        # materialize A^H A on a 16x16 grid and check its smallest eigenvalue
        model = make_model(n=16, ncoils=4, acceleration=3.0,
                           kind="cartesian-variable-density", seed=8)
        n = 16
        mat = np.zeros((n * n, n * n), dtype=np.complex128)
        for j in range(n * n):
            e = np.zeros(n * n, dtype=np.complex128)
            e[j] = 1.0
            mat[:, j] = gram_apply(ComplexImage(e.reshape(n, n)), model).data.ravel()
        eigvals = np.linalg.eigvalsh((mat + mat.conj().T) / 2)
        assert eigvals[0] < 1e-8
        assert eigvals[-1] <= 1.0 + 1e-9


class TestDynamic:
    def test_per_frame_masks_adjoint(self):
        n, t = 16, 3
        maps = generate_coil_maps(n, n, 2, seed=1)
        dyn = stack_masks([generate_mask(n, n, 2.0, "uniform", seed=s) for s in range(t)])
        model = SenseModel(maps, dyn, (n, n, t))
        assert adjoint_test(model, trials=5, seed=0) < 1e-10

    def test_static_mask_broadcasts_over_frames(self):
        n, t = 16, 2
        maps = generate_coil_maps(n, n, 2, seed=1)
        mask = generate_mask(n, n, 2.0, "uniform", seed=3)
        model = SenseModel(maps, mask, (n, n, t))
        x = rand_img((n, n, t), 14)
        out = sense_apply(x, model)
        for frame in range(t):
            model2d = SenseModel(maps, mask, (n, n))
            frame_out = sense_apply(ComplexImage(x.data[:, :, frame]), model2d)
            assert np.allclose(out.data[:, :, :, frame], frame_out.data)

    def test_frame_by_frame_application(self):
        n, t = 16, 3
        maps = generate_coil_maps(n, n, 2, seed=2)
        frames = [generate_mask(n, n, 2.0, "uniform", seed=10 + s) for s in range(t)]
        model = SenseModel(maps, stack_masks(frames), (n, n, t))
        x = rand_img((n, n, t), 15)
        out = sense_apply(x, model)
        for s in range(t):
            m2 = SenseModel(maps, frames[s], (n, n))
            expected = sense_apply(ComplexImage(x.data[:, :, s]), m2)
            assert np.allclose(out.data[:, :, :, s], expected.data)
