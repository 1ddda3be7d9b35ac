import numpy as np
import pytest

from manifold_mae import regularizer as R
from manifold_mae import tensor as T
from manifold_mae.errors import ConfigError, ContractError, DegenerateInputError

from conftest import finite_diff_grad, rel_err


def pooled(arr, layer=1):
    return R.PooledLayer(layer, T.Tensor(arr, requires_grad=True))


CFG = dict(ref_layer=1, target_layer=2)


class TestPoolPatches:
    def test_single_token_is_identity(self):
        tokens = T.Tensor(np.arange(6, dtype=np.float64).reshape(1, 1, 6))
        out = R.pool_patches(tokens, exclude_class_token=False)
        np.testing.assert_array_equal(out.data, tokens.data[:, 0, :])

    def test_two_token_mean(self):
        tokens = T.Tensor([[[1.0, 1.0], [3.0, 3.0]]])
        out = R.pool_patches(tokens, exclude_class_token=False)
        np.testing.assert_array_equal(out.data, [[2.0, 2.0]])

    def test_class_token_excluded(self):
        tokens = T.Tensor([[[100.0, 100.0], [1.0, 1.0], [3.0, 3.0]]])
        out = R.pool_patches(tokens, exclude_class_token=True)
        np.testing.assert_array_equal(out.data, [[2.0, 2.0]])

    def test_empty_after_exclusion(self):
        tokens = T.Tensor(np.zeros((1, 1, 4)))
        with pytest.raises(DegenerateInputError):
            R.pool_patches(tokens, exclude_class_token=True)

    def test_gradient_distributes_inverse_patch_count(self):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((2, 5, 3))
        with T.Tape():
            x = T.Tensor(x0, requires_grad=True)
            T.backward(T.sum_(R.pool_patches(x, exclude_class_token=False)))
        np.testing.assert_allclose(x.grad, np.full_like(x0, 1 / 5), rtol=0, atol=0)

        fd = finite_diff_grad(
            lambda a: float(a.mean(axis=1).sum()), x0)
        assert rel_err(x.grad, fd) < 1e-8


class TestPairwiseSqDists:
    def test_hand_case(self):
        out = R.pairwise_sq_dists(T.Tensor([[0.0], [2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 4.0], [4.0, 0.0]])

    def test_identical_rows_all_zero(self):
        z = T.Tensor(np.tile([1.0, 2.0, 3.0], (4, 1)))
        np.testing.assert_array_equal(R.pairwise_sq_dists(z).data, np.zeros((4, 4)))

    def test_matches_naive_pair_loop(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((5, 3))
        want = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                want[i, j] = np.sum((z[i] - z[j]) ** 2)
        got = R.pairwise_sq_dists(T.Tensor(z)).data
        assert rel_err(got, want) < 1e-12

    def test_symmetric_zero_diagonal_nonnegative(self):
        rng = np.random.default_rng(2)
        d2 = R.pairwise_sq_dists(T.Tensor(rng.standard_normal((6, 4)) * 100)).data
        np.testing.assert_array_equal(d2, d2.T)
        np.testing.assert_array_equal(np.diag(d2), np.zeros(6))
        assert np.all(d2 >= 0)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        z0 = rng.standard_normal((4, 3))
        w = rng.standard_normal((4, 4))

        with T.Tape():
            z = T.Tensor(z0, requires_grad=True)
            T.backward(T.sum_(T.mul(R.pairwise_sq_dists(z), T.Tensor(w))))

        def f(arr):
            diff = arr[:, None, :] - arr[None, :, :]
            return float(((diff ** 2).sum(-1) * w).sum())

        assert rel_err(z.grad, finite_diff_grad(f, z0)) < 1e-6

    def test_single_row_rejected(self):
        with pytest.raises(ContractError):
            R.pairwise_sq_dists(T.Tensor([[1.0, 2.0]]))


class TestAdaptiveSigma:
    def test_zero_variance_hits_floor(self):
        d2 = np.array([[0.0, 3.0], [3.0, 0.0]])
        assert R.adaptive_sigma(d2, sigma_floor=1e-8) == pytest.approx(1e-4, abs=0)

    def test_three_point_population_variance(self):
        d2 = np.array([[0.0, 1.0, 4.0], [1.0, 0.0, 9.0], [4.0, 9.0, 0.0]])
        # off-diagonal values {1, 4, 9}: population variance 98/9
        assert R.adaptive_sigma(d2) == pytest.approx(3.2998316455372216, rel=1e-15)

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((5, 3))
        d2 = R.pairwise_sq_dists(T.Tensor(z)).data
        base = R.adaptive_sigma(d2)
        for c in (0.5, 2.0, 7.0):
            assert R.adaptive_sigma(c * d2) == pytest.approx(c * base, rel=1e-12)


class TestRbfKernel:
    def test_unit_diagonal_exact(self):
        rng = np.random.default_rng(5)
        d2 = R.pairwise_sq_dists(T.Tensor(rng.standard_normal((4, 2))))
        k = R.rbf_kernel(d2, sigma=0.7)
        assert np.all(np.diag(k.weights.data) == 1.0)

    def test_hand_value(self):
        d2 = T.Tensor([[0.0, 2.0], [2.0, 0.0]])
        k = R.rbf_kernel(d2, sigma=1.0)
        assert k.weights.data[0, 1] == pytest.approx(np.exp(-1.0), rel=1e-15)

    def test_monotone_in_distance(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a, b = np.sort(rng.uniform(0.01, 50.0, size=2))
            sigma = rng.uniform(0.1, 5.0)
            ka = np.exp(-a / (2 * sigma))
            kb = np.exp(-b / (2 * sigma))
            if a < b:
                assert ka > kb

    def test_nonpositive_sigma_rejected(self):
        d2 = T.Tensor([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(ContractError):
            R.rbf_kernel(d2, sigma=0.0)

    def test_invariants_on_random_batches(self):
        # B >= 3 keeps the adaptive bandwidth off its floor, so entries stay
        # strictly positive; the B=2 underflow case is covered below.
        rng = np.random.default_rng(7)
        for _ in range(20):
            b = rng.integers(3, 9)
            d = rng.integers(1, 5)
            z = T.Tensor(rng.standard_normal((b, d)) * rng.uniform(0.1, 10))
            d2 = R.pairwise_sq_dists(z)
            k = R.rbf_kernel(d2, R.adaptive_sigma(d2))
            k.validate()
            w = k.weights.data
            assert np.all(w > 0.0) and np.all(w <= 1.0)

    def test_collapsed_bandwidth_underflows_to_zero(self):
        # A 2-sample batch has a single repeated off-diagonal distance, so the
        # variance-based bandwidth hits its floor and the off-diagonal weight
        # underflows to exactly 0; validation tolerates that.
        d2 = R.pairwise_sq_dists(T.Tensor([[0.0], [2.0]]))
        sigma = R.adaptive_sigma(d2)
        assert sigma == pytest.approx(1e-4, abs=0)
        k = R.rbf_kernel(d2, sigma)
        k.validate()
        assert k.weights.data[0, 1] == 0.0


class TestLaplacian:
    def test_identity_kernel_gives_zero_unnormalized(self):
        k = R.KernelMatrix(weights=T.eye(2), sigma=1.0)
        out = R.laplacian(k, "unnormalized")
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_two_point_hand_case(self):
        e2 = np.exp(-2.0)
        k = R.KernelMatrix(weights=T.Tensor([[1.0, e2], [e2, 1.0]]), sigma=1.0)
        out = R.laplacian(k, "unnormalized")
        np.testing.assert_allclose(out.data, [[e2, -e2], [-e2, e2]], rtol=0, atol=1e-15)

    def test_symmetric_normalized_spectrum_in_0_2(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            b = rng.integers(2, 7)
            z = T.Tensor(rng.standard_normal((b, 3)))
            d2 = R.pairwise_sq_dists(z)
            k = R.rbf_kernel(d2, R.adaptive_sigma(d2))
            lap = R.laplacian(k, "symmetric_normalized").data
            np.testing.assert_allclose(lap, lap.T, atol=1e-12)
            eig = np.linalg.eigvalsh(lap)
            assert eig.min() >= -1e-10 and eig.max() <= 2 + 1e-10

    def test_all_modes_symmetric(self):
        rng = np.random.default_rng(9)
        z = T.Tensor(rng.standard_normal((5, 2)))
        d2 = R.pairwise_sq_dists(z)
        k = R.rbf_kernel(d2, R.adaptive_sigma(d2))
        for mode in R.LAPLACIAN_MODES:
            lap = R.laplacian(k, mode).data
            np.testing.assert_allclose(lap, lap.T, atol=1e-12)


class TestDoubleSumLoss:
    def test_identical_target_rows_vanish(self):
        rng = np.random.default_rng(10)
        z_ref = pooled(rng.standard_normal((4, 3)), 1)
        z_tgt = pooled(np.tile([1.0, 2.0], (4, 1)), 2)
        cfg = R.RegConfig(**CFG)
        assert R.reg_loss_double_sum(z_ref, z_tgt, cfg).item() == 0.0

    def test_two_point_hand_value(self):
        z = [[0.0], [2.0]]
        cfg = R.RegConfig(**CFG, sigma_override=1.0)
        loss = R.reg_loss_double_sum(pooled(z, 1), pooled(z, 2), cfg)
        assert loss.item() == pytest.approx(0.2706705664732254, rel=1e-14)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(11)
        zr = rng.standard_normal((6, 3))
        zt = rng.standard_normal((6, 4))
        cfg = R.RegConfig(**CFG)
        base = R.reg_loss_double_sum(pooled(zr, 1), pooled(zt, 2), cfg).item()
        for _ in range(5):
            p = rng.permutation(6)
            v = R.reg_loss_double_sum(pooled(zr[p], 1), pooled(zt[p], 2), cfg).item()
            assert v == pytest.approx(base, rel=1e-12)

    def test_batch_mismatch_rejected(self):
        cfg = R.RegConfig(**CFG)
        with pytest.raises(ContractError):
            R.reg_loss_double_sum(pooled(np.zeros((3, 2)), 1),
                                  pooled(np.zeros((4, 2)), 2), cfg)


class TestTraceLoss:
    def test_equals_half_double_sum_unnormalized(self):
        rng = np.random.default_rng(12)
        cfg = R.RegConfig(**CFG, laplacian_mode="unnormalized")
        for _ in range(50):
            b = rng.integers(2, 9)
            d = rng.integers(1, 5)
            zr = pooled(rng.standard_normal((b, d)), 1)
            zt = pooled(rng.standard_normal((b, d)), 2)
            ds = R.reg_loss_double_sum(zr, zt, cfg).item()
            tr = R.reg_loss_trace(zr, zt, cfg).item()
            assert abs(ds - 2 * tr) <= 1e-10 * max(abs(ds), 1e-30)

    def test_nonnegative_psd_modes(self):
        rng = np.random.default_rng(13)
        for mode in ("unnormalized", "symmetric_normalized"):
            cfg = R.RegConfig(**CFG, laplacian_mode=mode)
            for _ in range(25):
                b = rng.integers(2, 8)
                zr = pooled(rng.standard_normal((b, 3)), 1)
                zt = pooled(rng.standard_normal((b, 3)), 2)
                assert R.reg_loss_trace(zr, zt, cfg).item() >= -1e-12

    def test_normalized_null_space_is_sqrt_degrees(self):
        # loss vanishes iff target rows are proportional to sqrt(degree)
        rng = np.random.default_rng(14)
        cfg = R.RegConfig(**CFG)
        for _ in range(10):
            b = int(rng.integers(2, 7))
            zr = pooled(rng.standard_normal((b, 3)), 1)
            d2 = R.pairwise_sq_dists(zr.values)
            k = R.rbf_kernel(d2, R.adaptive_sigma(d2))
            degrees = k.weights.data.sum(axis=1)
            direction = rng.standard_normal(2)
            zt = pooled(np.sqrt(degrees)[:, None] * direction[None, :], 2)
            assert abs(R.reg_loss_trace(zr, zt, cfg).item()) < 1e-12
            # identical rows only vanish when all degrees are equal
            zt_const = pooled(np.tile(direction, (b, 1)), 2)
            val = R.reg_loss_trace(zr, zt_const, cfg).item()
            if np.ptp(degrees) > 1e-6:
                assert val > 0

    def test_adjacency_mode_nonzero_on_identical_rows(self):
        # With L = D^{-1/2} W D^{-1/2} identical target rows score
        # (1/B^2) ||z||^2 sum_ij W_ij / sqrt(D_ii D_jj) instead of zero.
        z_row = np.array([1.5, -0.5])
        zr = pooled([[0.0], [2.0]], 1)
        cfg = R.RegConfig(**CFG, laplacian_mode="normalized_adjacency",
                          sigma_override=1.0)
        loss = R.reg_loss_trace(zr, pooled(np.tile(z_row, (2, 1)), 2), cfg).item()
        w = np.exp(-2.0)
        deg = 1.0 + w
        want = (z_row @ z_row) * (2 * 1.0 / deg + 2 * w / deg) / 4.0
        assert loss == pytest.approx(want, rel=1e-12)
        assert loss > 0

    def test_constant_shift_invariance_unnormalized(self):
        rng = np.random.default_rng(15)
        cfg = R.RegConfig(**CFG, laplacian_mode="unnormalized")
        zr = pooled(rng.standard_normal((5, 3)), 1)
        zt0 = rng.standard_normal((5, 4))
        base = R.reg_loss_trace(zr, pooled(zt0, 2), cfg).item()
        shifted = R.reg_loss_trace(zr, pooled(zt0 + np.array([3.0, -1.0, 0.5, 9.0]), 2),
                                   cfg).item()
        assert shifted == pytest.approx(base, rel=1e-10)


class TestGradients:
    @pytest.mark.parametrize("mode", R.LAPLACIAN_MODES)
    def test_flow_mode_matches_finite_differences(self, mode):
        rng = np.random.default_rng(16)
        for trial in range(5):
            zr0 = rng.standard_normal((4, 3))
            zt0 = rng.standard_normal((4, 2))
            d2 = R.pairwise_sq_dists(T.Tensor(zr0))
            sigma = R.adaptive_sigma(d2)
            cfg = R.RegConfig(**CFG, laplacian_mode=mode, sigma_override=sigma)

            with T.Tape():
                zr = pooled(zr0, 1)
                zt = pooled(zt0, 2)
                T.backward(R.reg_loss_trace(zr, zt, cfg))

            def f_ref(arr):
                return R.reg_loss_trace(R.PooledLayer(1, T.Tensor(arr)),
                                        R.PooledLayer(2, T.Tensor(zt0)), cfg).item()

            def f_tgt(arr):
                return R.reg_loss_trace(R.PooledLayer(1, T.Tensor(zr0)),
                                        R.PooledLayer(2, T.Tensor(arr)), cfg).item()

            assert rel_err(zr.values.grad, finite_diff_grad(f_ref, zr0)) < 1e-4
            assert rel_err(zt.values.grad, finite_diff_grad(f_tgt, zt0)) < 1e-4

    def test_detach_mode_reference_gradient_exactly_zero(self):
        rng = np.random.default_rng(17)
        zr0 = rng.standard_normal((5, 3))
        zt0 = rng.standard_normal((5, 3))
        cfg = R.RegConfig(**CFG, kernel_grad="detach")

        with T.Tape():
            zr = pooled(zr0, 1)
            zt = pooled(zt0, 2)
            T.backward(R.reg_loss_trace(zr, zt, cfg))

        assert zr.values.grad is None
        assert zt.values.grad is not None

        # target-path gradient still matches finite differences
        d2 = R.pairwise_sq_dists(T.Tensor(zr0))
        cfg_fd = R.RegConfig(**CFG, kernel_grad="detach",
                             sigma_override=R.adaptive_sigma(d2))
        with T.Tape():
            zr2 = pooled(zr0, 1)
            zt2 = pooled(zt0, 2)
            T.backward(R.reg_loss_trace(zr2, zt2, cfg_fd))

        def f_tgt(arr):
            return R.reg_loss_trace(R.PooledLayer(1, T.Tensor(zr0)),
                                    R.PooledLayer(2, T.Tensor(arr)), cfg_fd).item()

        assert rel_err(zt2.values.grad, finite_diff_grad(f_tgt, zt0)) < 1e-4

    def test_double_sum_gradient_flow(self):
        rng = np.random.default_rng(18)
        zr0 = rng.standard_normal((4, 2))
        zt0 = rng.standard_normal((4, 2))
        d2 = R.pairwise_sq_dists(T.Tensor(zr0))
        cfg = R.RegConfig(**CFG, sigma_override=R.adaptive_sigma(d2))

        with T.Tape():
            zr = pooled(zr0, 1)
            zt = pooled(zt0, 2)
            T.backward(R.reg_loss_double_sum(zr, zt, cfg))

        def f_ref(arr):
            return R.reg_loss_double_sum(R.PooledLayer(1, T.Tensor(arr)),
                                         R.PooledLayer(2, T.Tensor(zt0)), cfg).item()

        assert rel_err(zr.values.grad, finite_diff_grad(f_ref, zr0)) < 1e-4


class TestRegLossDispatch:
    def make_acts(self, rng, b=4, d=3, layers=(1, 2, 3, 4)):
        return {l: pooled(rng.standard_normal((b, d)), l) for l in layers}

    def test_missing_layer_names_it(self):
        rng = np.random.default_rng(19)
        acts = self.make_acts(rng, layers=(1, 2))
        cfg = R.RegConfig(ref_layer=3, target_layer=4)
        with pytest.raises(ConfigError, match="3"):
            R.reg_loss(acts, cfg)

    def test_same_layer_pair_rejected(self):
        with pytest.raises(ConfigError):
            R.RegConfig(ref_layer=2, target_layer=2)

    def test_all_ordered_pairs_is_sum_of_directed_traces(self):
        rng = np.random.default_rng(20)
        acts = self.make_acts(rng)
        cfg_single = R.RegConfig(ref_layer=3, target_layer=4)
        cfg_all = R.RegConfig(ref_layer=3, target_layer=4, pair_mode="all_ordered_pairs")
        fwd = R.reg_loss_trace(acts[3], acts[4], cfg_single).item()
        bwd = R.reg_loss_trace(acts[4], acts[3], cfg_single).item()
        assert R.reg_loss(acts, cfg_all).item() == pytest.approx(fwd + bwd, rel=1e-12)

    def test_single_pair_matches_direct_call(self):
        rng = np.random.default_rng(21)
        acts = self.make_acts(rng)
        cfg = R.RegConfig(ref_layer=3, target_layer=4)
        assert (R.reg_loss(acts, cfg).item()
                == R.reg_loss_trace(acts[3], acts[4], cfg).item())
