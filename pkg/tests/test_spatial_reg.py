"""Filter/response decorrelation losses against loop oracles and identities."""

import numpy as np
import pytest

from occludrop.errors import ContractError
from occludrop.gradcheck import finite_difference_check
from occludrop.spatial_reg import (
    FilterBank,
    ResponseSet,
    channel_response_heatmap,
    filter_orthogonal_loss,
    mean_abs_pairwise_response_cosine,
    response_orthogonal_loss,
    write_heatmap_pgm,
)
from occludrop.tensor import Tensor

from oracles import filter_loss_loops, response_loss_loops


class TestFilterLoss:
    def test_orthogonal_columns_give_zero(self):
        # two filters whose matching columns are disjoint basis vectors
        w = np.zeros((2, 1, 3, 3))
        w[0, 0, 0, :] = 1.0  # filter 0: every column is e0
        w[1, 0, 1, :] = 1.0  # filter 1: every column is e1
        loss = filter_orthogonal_loss(FilterBank(Tensor(w)))
        assert loss.item() == 0.0

    def test_identical_filters_give_two_k(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((1, 2, 3, 3))
        w = np.concatenate([f, f], axis=0)
        loss = filter_orthogonal_loss(FilterBank(Tensor(w)))
        k = 3
        assert abs(loss.item() - 2 * k) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((4, 3, 3, 3))
        got = filter_orthogonal_loss(FilterBank(Tensor(w))).item()
        np.testing.assert_allclose(got, filter_loss_loops(w), atol=1e-10, rtol=0)

    @pytest.mark.parametrize("mode", ["kernel_cols", "kernel_rows"])
    def test_column_modes_match_oracle(self, mode):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((3, 2, 3, 3))
        got = filter_orthogonal_loss(FilterBank(Tensor(w), column_mode=mode)).item()
        np.testing.assert_allclose(got, filter_loss_loops(w, column_mode=mode), atol=1e-10)

    def test_column_view_is_pure_reshape(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((2, 3, 3, 3))
        cv = FilterBank(Tensor(w)).column_view().data
        for i in range(2):
            for ci in range(3):
                for ky in range(3):
                    for kx in range(3):
                        assert cv[i, ci * 3 + ky, kx] == w[i, ci, ky, kx]

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((3, 2, 3, 3))
        base = filter_orthogonal_loss(FilterBank(Tensor(w))).item()
        scaled = w * np.array([2.0, 5.0, 0.5])[:, None, None, None]
        got = filter_orthogonal_loss(FilterBank(Tensor(scaled))).item()
        assert abs(got - base) / base < 1e-6

    def test_needs_two_filters(self):
        with pytest.raises(ContractError):
            filter_orthogonal_loss(FilterBank(Tensor(np.ones((1, 2, 3, 3)))))

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for seed in range(10):
            w = np.random.default_rng(seed).standard_normal((3, 2, 3, 3))
            assert filter_orthogonal_loss(FilterBank(Tensor(w))).item() >= 0.0

    def test_gradient(self):
        rng = np.random.default_rng(12)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        report = finite_difference_check(
            lambda w: filter_orthogonal_loss(FilterBank(w)), [w], step=1e-5
        )
        assert report.max_rel_error < 1e-4


class TestResponseLoss:
    def test_disjoint_support_gives_zero(self):
        f = np.zeros((1, 3, 2, 2))
        f[0, 0, 0, 0] = 1.0
        f[0, 1, 0, 1] = 2.0
        f[0, 2, 1, 0] = -3.0
        loss = response_orthogonal_loss(ResponseSet(Tensor(f)))
        assert loss.item() == 0.0

    def test_identical_channels_give_two(self):
        rng = np.random.default_rng(0)
        ch = rng.standard_normal((1, 1, 3, 3))
        f = np.concatenate([ch, ch], axis=1)
        loss = response_orthogonal_loss(ResponseSet(Tensor(f)))
        assert abs(loss.item() - 2.0) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((3, 3, 4, 4))
        got = response_orthogonal_loss(ResponseSet(Tensor(f))).item()
        np.testing.assert_allclose(got, response_loss_loops(f), atol=1e-10, rtol=0)

    def test_batch_mean_scaling(self):
        rng = np.random.default_rng(6)
        f = rng.standard_normal((1, 3, 4, 4))
        single = response_orthogonal_loss(ResponseSet(Tensor(f))).item()
        doubled = response_orthogonal_loss(ResponseSet(Tensor(np.concatenate([f, f])))).item()
        np.testing.assert_allclose(doubled, single, rtol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(7)
        f = rng.standard_normal((2, 3, 4, 4))
        base = response_orthogonal_loss(ResponseSet(Tensor(f))).item()
        got = response_orthogonal_loss(ResponseSet(Tensor(f * 7.5))).item()
        assert abs(got - base) / base < 1e-6

    def test_needs_two_channels(self):
        with pytest.raises(ContractError):
            response_orthogonal_loss(ResponseSet(Tensor(np.ones((2, 1, 3, 3)))))

    def test_gradient(self):
        rng = np.random.default_rng(13)
        f = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        report = finite_difference_check(
            lambda f: response_orthogonal_loss(ResponseSet(f)), [f], step=1e-5
        )
        assert report.max_rel_error < 1e-4

    def test_mean_abs_cosine_bounds(self):
        rng = np.random.default_rng(8)
        f = rng.standard_normal((2, 4, 3, 3))
        v = mean_abs_pairwise_response_cosine(f)
        assert 0.0 <= v <= 1.0
        ch = rng.standard_normal((1, 1, 3, 3))
        dup = np.concatenate([ch, ch], axis=1)
        assert mean_abs_pairwise_response_cosine(dup) > 0.999


class TestHeatmap:
    def test_constant_channel_zero_map(self):
        rset = ResponseSet(Tensor(np.full((2, 2, 3, 3), 4.0)))
        heat = channel_response_heatmap(rset, 0)
        np.testing.assert_array_equal(heat, np.zeros((3, 3)))

    def test_one_hot_activation(self):
        f = np.zeros((1, 1, 4, 4))
        f[0, 0, 2, 1] = 5.0
        heat = channel_response_heatmap(ResponseSet(Tensor(f)), 0)
        assert heat[2, 1] == 1.0
        assert heat.sum() == 1.0

    def test_channel_out_of_range(self):
        with pytest.raises(ContractError):
            channel_response_heatmap(ResponseSet(Tensor(np.zeros((1, 2, 3, 3)))), 5)

    def test_pgm_roundtrip(self, tmp_path):
        heat = np.linspace(0, 1, 16).reshape(4, 4)
        path = tmp_path / "layer_0.pgm"
        write_heatmap_pgm(path, heat)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n4 4\n255\n")
        assert len(raw) == len(b"P5\n4 4\n255\n") + 16
