import numpy as np
import pytest

from icreg.objective import (
    MaskStats,
    ObjectiveConfig,
    WeightMask,
    box_sum,
    box_sum_adjoint,
    diffusive_reg,
    local_ncc,
    mask_diagnostics,
    objective_gradient,
    objective_value,
    objective_value_and_gradient,
    reg_value_and_gradient,
)
from icreg.transform import DisplacementField
from icreg.volume import Volume, gaussian_smooth

from oracles import box_sum_oracle, diffusive_reg_oracle, local_ncc_oracle


def textured(shape, seed, channels=1):
    rng = np.random.default_rng(seed)
    return Volume(rng.random((channels,) + shape))


def unit_textured(shape, seed, channels=1):
    # window variances near 1, so the epsilon guard is negligible
    rng = np.random.default_rng(seed)
    return Volume(rng.standard_normal((channels,) + shape))


def smooth_field(dims, scale, seed):
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    comps = gaussian_smooth(Volume(rng.standard_normal((3, nz, ny, nx))), 1.0).data
    return DisplacementField(np.array(comps) * scale)


class TestObjectiveConfig:
    def test_window_must_be_odd(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(ncc_window=4)

    def test_window_must_be_at_least_3(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(ncc_window=1)

    def test_negative_theta_rejected(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(theta=-1.0)

    def test_defaults(self):
        cfg = ObjectiveConfig()
        assert cfg.epsilon == 1e-5
        assert cfg.theta == 0.0


class TestWeightMask:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            WeightMask(np.full((3, 3, 3), 1.5))
        with pytest.raises(ValueError):
            WeightMask(np.full((3, 3, 3), -0.1))

    def test_diagnostics_all_ones(self):
        stats = mask_diagnostics(WeightMask(np.ones((4, 4, 4))))
        assert stats == MaskStats(min=1.0, max=1.0, mean=1.0, fraction_below_half=0.0)

    def test_diagnostics_mixed(self):
        vals = np.zeros((2, 2, 2))
        vals[0, 0, 0] = 1.0
        stats = mask_diagnostics(WeightMask(vals))
        assert stats.mean == pytest.approx(1 / 8)
        assert stats.fraction_below_half == pytest.approx(7 / 8)


class TestBoxSum:
    def test_matches_clamped_window_oracle(self):
        rng = np.random.default_rng(30)
        grid = rng.random((5, 6, 7))
        for radius in (1, 2):
            assert box_sum(grid, radius) == pytest.approx(
                box_sum_oracle(grid, radius), abs=1e-12
            )

    def test_adjointness(self):
        rng = np.random.default_rng(31)
        a = rng.random((6, 5, 4))
        b = rng.random((6, 5, 4))
        lhs = float((box_sum(a, 1) * b).sum())
        rhs = float((a * box_sum_adjoint(b, 1)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-13)


class TestLocalNcc:
    def test_self_similarity_near_one(self):
        v = unit_textured((6, 6, 6), seed=32)
        assert local_ncc(v, v, ObjectiveConfig(ncc_window=3)) >= 0.999

    def test_contrast_inversion_near_minus_one(self):
        v = unit_textured((6, 6, 6), seed=33)
        inv = Volume(1.0 - v.data)
        assert local_ncc(v, inv, ObjectiveConfig(ncc_window=3)) <= -0.999

    def test_matches_exhaustive_window_oracle(self):
        a = textured((6, 6, 6), seed=34)
        b = textured((6, 6, 6), seed=35)
        cfg = ObjectiveConfig(ncc_window=3)
        want = local_ncc_oracle(a.data, b.data, 3, cfg.epsilon)
        assert local_ncc(a, b, cfg) == pytest.approx(want, abs=1e-10)

    def test_multichannel_matches_oracle(self):
        a = textured((5, 5, 5), seed=36, channels=2)
        b = textured((5, 5, 5), seed=37, channels=2)
        cfg = ObjectiveConfig(ncc_window=3)
        want = local_ncc_oracle(a.data, b.data, 3, cfg.epsilon)
        assert local_ncc(a, b, cfg) == pytest.approx(want, abs=1e-10)

    def test_masked_matches_oracle(self):
        a = textured((5, 5, 5), seed=38)
        b = textured((5, 5, 5), seed=39)
        rng = np.random.default_rng(40)
        m = rng.random((5, 5, 5))
        cfg = ObjectiveConfig(ncc_window=3)
        want = local_ncc_oracle(a.data, b.data, 3, cfg.epsilon, mask=m)
        assert local_ncc(a, b, cfg, WeightMask(m)) == pytest.approx(want, abs=1e-10)

    def test_symmetry_exact(self):
        a = textured((5, 5, 5), seed=41)
        b = textured((5, 5, 5), seed=42)
        cfg = ObjectiveConfig(ncc_window=3)
        assert local_ncc(a, b, cfg) == local_ncc(b, a, cfg)

    def test_intensity_rescale_invariance(self):
        a = unit_textured((6, 6, 6), seed=43)
        b = unit_textured((6, 6, 6), seed=44)
        cfg = ObjectiveConfig(ncc_window=3)
        base = local_ncc(a, b, cfg)
        scaled = Volume(3.0 * a.data + 0.7)
        assert local_ncc(scaled, b, cfg) == pytest.approx(base, abs=1e-6)

    def test_all_ones_mask_bitwise(self):
        a = textured((5, 5, 5), seed=45)
        b = textured((5, 5, 5), seed=46)
        cfg = ObjectiveConfig(ncc_window=3)
        assert local_ncc(a, b, cfg, WeightMask(np.ones((5, 5, 5)))) == local_ncc(
            a, b, cfg
        )

    def test_all_zero_mask_rejected(self):
        a = textured((4, 4, 4), seed=47)
        with pytest.raises(ValueError):
            local_ncc(a, a, ObjectiveConfig(), WeightMask(np.zeros((4, 4, 4))))

    def test_dims_mismatch(self):
        with pytest.raises(ValueError):
            local_ncc(
                textured((4, 4, 4), 1), textured((5, 5, 5), 2), ObjectiveConfig()
            )


class TestDiffusiveReg:
    def test_zero_field(self):
        assert diffusive_reg(DisplacementField.zero((4, 4, 4))) == 0.0

    def test_constant_field(self):
        comps = np.full((3, 4, 4, 4), 5.0)
        assert diffusive_reg(DisplacementField(comps)) == 0.0

    def test_linear_ramp_hand_value(self):
        # u_x = x on 4^3: forward differences are 1 except at the far column;
        # 48 unit squared-gradients over 3 * 64 voxel-component terms
        comps = np.zeros((3, 4, 4, 4))
        comps[0] = np.arange(4.0)
        assert diffusive_reg(DisplacementField(comps)) == pytest.approx(0.25, abs=0)

    def test_matches_loop_oracle(self):
        u = smooth_field((6, 6, 6), 1.3, seed=48)
        want = diffusive_reg_oracle(u.components)
        assert diffusive_reg(u) == pytest.approx(want, abs=1e-12)

    def test_masked_matches_loop_oracle(self):
        u = smooth_field((5, 5, 5), 1.1, seed=49)
        m = np.random.default_rng(50).random((5, 5, 5))
        want = diffusive_reg_oracle(u.components, mask=m)
        assert diffusive_reg(u, WeightMask(m)) == pytest.approx(want, abs=1e-12)

    def test_nonnegative_and_zero_only_for_constant(self):
        u = smooth_field((5, 5, 5), 0.01, seed=51)
        assert diffusive_reg(u) > 0.0

    def test_all_zero_mask_rejected(self):
        with pytest.raises(ValueError):
            diffusive_reg(DisplacementField.zero((4, 4, 4)), WeightMask(np.zeros((4, 4, 4))))


class TestRegGradient:
    def test_matches_finite_differences(self):
        u0 = smooth_field((5, 5, 5), 0.8, seed=52).components
        value, grad = reg_value_and_gradient(u0)
        h = 1e-6
        rng = np.random.default_rng(53)
        for _ in range(20):
            k = rng.integers(0, 3)
            z, y, x = rng.integers(0, 5, 3)
            up = u0.copy()
            up[k, z, y, x] += h
            dn = u0.copy()
            dn[k, z, y, x] -= h
            fd = (
                diffusive_reg(DisplacementField(up))
                - diffusive_reg(DisplacementField(dn))
            ) / (2 * h)
            assert grad[k, z, y, x] == pytest.approx(fd, abs=1e-6)

    def test_value_agrees_with_diffusive_reg(self):
        u = smooth_field((5, 5, 5), 1.0, seed=54)
        value, _ = reg_value_and_gradient(u.components)
        assert value == pytest.approx(diffusive_reg(u), abs=1e-14)


class TestObjectiveValue:
    def test_aligned_pair_is_minus_one(self):
        v = textured((6, 6, 6), seed=55)
        val = objective_value(v, v, DisplacementField.zero(v.dims), ObjectiveConfig(theta=12500.0))
        assert val == pytest.approx(-1.0, abs=2e-3)

    def test_theta_zero_equals_minus_ncc(self):
        a = textured((5, 5, 5), seed=56)
        b = textured((5, 5, 5), seed=57)
        cfg = ObjectiveConfig(ncc_window=3, theta=0.0)
        assert objective_value(a, b, DisplacementField.zero(a.dims), cfg) == -local_ncc(
            a, b, cfg
        )

    def test_composition_of_oracles(self):
        from icreg.transform import warp

        a = textured((5, 5, 5), seed=58)
        b = textured((5, 5, 5), seed=59)
        u = smooth_field((5, 5, 5), 0.4, seed=60)
        cfg = ObjectiveConfig(ncc_window=3, theta=100.0)
        want = -local_ncc_oracle(
            warp(a, u).data, b.data, 3, cfg.epsilon
        ) + 100.0 * diffusive_reg_oracle(u.components)
        assert objective_value(a, b, u, cfg) == pytest.approx(want, abs=1e-10)


class TestObjectiveGradient:
    def test_matches_central_differences_small(self):
        a = textured((6, 6, 6), seed=61, channels=2)
        b = textured((6, 6, 6), seed=62, channels=2)
        u0 = smooth_field((6, 6, 6), 0.3, seed=63).components
        cfg = ObjectiveConfig(ncc_window=3, theta=12500.0)
        _, grad = objective_value_and_gradient(a, b, DisplacementField(u0), cfg)
        h = 1e-4
        rng = np.random.default_rng(64)
        for _ in range(25):
            k = rng.integers(0, 3)
            z, y, x = rng.integers(0, 6, 3)
            up = u0.copy()
            up[k, z, y, x] += h
            dn = u0.copy()
            dn[k, z, y, x] -= h
            fd = (
                objective_value(a, b, DisplacementField(up), cfg)
                - objective_value(a, b, DisplacementField(dn), cfg)
            ) / (2 * h)
            g = grad[k, z, y, x]
            denom = max(abs(fd), abs(g))
            if denom > 1e-6:
                assert abs(fd - g) / denom < 1e-3
            else:
                assert abs(fd - g) < 1e-8

    def test_constant_volumes_leave_only_regularizer(self):
        c = Volume(np.full((1, 5, 5, 5), 0.4))
        u = smooth_field((5, 5, 5), 0.7, seed=65)
        cfg = ObjectiveConfig(ncc_window=3, theta=250.0)
        grad = objective_gradient(c, c, u, cfg)
        _, reg_grad = reg_value_and_gradient(u.components)
        assert grad.components == pytest.approx(250.0 * reg_grad, abs=1e-10)

    def test_gradient_field_shape_and_spacing(self):
        a = textured((4, 5, 6), seed=66)
        u = DisplacementField.zero(a.dims, spacing=(1.0, 2.0, 3.0))
        out = objective_gradient(a, a, u, ObjectiveConfig())
        assert out.dims == a.dims
        assert out.spacing == (1.0, 2.0, 3.0)

    def test_all_ones_mask_bitwise(self):
        a = textured((5, 5, 5), seed=67)
        b = textured((5, 5, 5), seed=68)
        u = smooth_field((5, 5, 5), 0.2, seed=69)
        cfg = ObjectiveConfig(ncc_window=3, theta=500.0)
        v1, g1 = objective_value_and_gradient(a, b, u, cfg)
        v2, g2 = objective_value_and_gradient(
            a, b, u, cfg, WeightMask(np.ones((5, 5, 5)))
        )
        assert v1 == v2
        assert np.array_equal(g1, g2)
