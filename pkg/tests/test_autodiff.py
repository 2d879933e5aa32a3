"""Differentiation core: values against hand cases, gradients against
central finite differences (the oracle throughout this file)."""

import numpy as np
import pytest

from relpu.autodiff import (
    Adam,
    DiffBuffer,
    LayerParams,
    add,
    concat_cols,
    concat_tile,
    edge_aggregate,
    he_uniform_layer,
    linear,
    maxpool_rows,
    relu,
    repeat_rows,
    scheduled_lr,
    upsample_linear,
    weighted_sum,
)
from relpu.exceptions import InvalidArgument, TrainingDiverged

from fdcheck import numeric_grad, rel_err


class TestLinear:
    def test_identity_weights_pass_through(self):
        x = DiffBuffer(np.array([[1.0, 2.0], [3.0, 4.0]]))
        w = DiffBuffer(np.eye(2))
        b = DiffBuffer(np.zeros((1, 2)))
        np.testing.assert_array_equal(linear(x, w, b).value, x.value)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        xv = rng.standard_normal((4, 3))
        wv = rng.standard_normal((3, 5))
        bv = rng.standard_normal((1, 5))
        probe = rng.standard_normal((4, 5))

        def fwd():
            x, w, b = DiffBuffer(xv), DiffBuffer(wv), DiffBuffer(bv)
            return x, w, b, weighted_sum(linear(x, w, b), probe)

        x, w, b, loss = fwd()
        loss.backward()
        for buf, arr in [(x, xv), (w, wv), (b, bv)]:
            num = numeric_grad(lambda: fwd()[3].value.item(), arr)
            assert rel_err(buf.grad, num) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgument):
            linear(DiffBuffer(np.zeros((2, 3))), DiffBuffer(np.zeros((4, 5))),
                   DiffBuffer(np.zeros((1, 5))))


class TestUpsampleLinear:
    def test_value_matches_repeat_concat_linear(self):
        rng = np.random.default_rng(3)
        xv = rng.standard_normal((6, 4))
        cv = rng.standard_normal((3, 2))
        wv = rng.standard_normal((6, 5))
        bv = rng.standard_normal((1, 5))
        fused = upsample_linear(DiffBuffer(xv), cv, DiffBuffer(wv),
                                DiffBuffer(bv))
        rep = np.repeat(xv, 3, axis=0)
        ref = linear(concat_cols(DiffBuffer(rep),
                                 DiffBuffer(np.tile(cv, (6, 1)))),
                     DiffBuffer(wv), DiffBuffer(bv))
        assert fused.value.shape == (18, 5)
        np.testing.assert_allclose(fused.value, ref.value, rtol=1e-12)

    @pytest.mark.parametrize("batched", [False, True])
    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_match_finite_differences(self, seed, batched):
        rng = np.random.default_rng(40 + seed)
        shape = (2, 4, 3) if batched else (4, 3)
        xv = rng.standard_normal(shape)
        cv = rng.standard_normal((3, 2))
        wv = rng.standard_normal((5, 6))
        bv = rng.standard_normal((1, 6))
        probe = rng.standard_normal(shape[:-2] + (12, 6))

        def fwd():
            x, w, b = DiffBuffer(xv), DiffBuffer(wv), DiffBuffer(bv)
            return x, w, b, weighted_sum(upsample_linear(x, cv, w, b), probe)

        x, w, b, loss = fwd()
        loss.backward()
        for buf, arr in [(x, xv), (w, wv), (b, bv)]:
            num = numeric_grad(lambda: fwd()[3].value.item(), arr)
            assert rel_err(buf.grad, num) < 1e-6

    def test_batched_value_matches_per_sample(self):
        rng = np.random.default_rng(9)
        xv = rng.standard_normal((3, 5, 4))
        cv = rng.standard_normal((4, 2))
        wv = rng.standard_normal((6, 7))
        bv = rng.standard_normal((1, 7))
        out = upsample_linear(DiffBuffer(xv), cv, DiffBuffer(wv),
                              DiffBuffer(bv))
        assert out.value.shape == (3, 20, 7)
        for i in range(3):
            single = upsample_linear(DiffBuffer(xv[i]), cv, DiffBuffer(wv),
                                     DiffBuffer(bv))
            np.testing.assert_array_equal(out.value[i], single.value)

    def test_shape_mismatches_rejected(self):
        x = DiffBuffer(np.zeros((4, 3)))
        w = DiffBuffer(np.zeros((5, 6)))
        b = DiffBuffer(np.zeros((1, 6)))
        with pytest.raises(InvalidArgument):
            upsample_linear(x, np.zeros((0, 2)), w, b)  # no code rows
        with pytest.raises(InvalidArgument):
            upsample_linear(x, np.zeros((4, 5)), w, b)  # weight rows
        with pytest.raises(InvalidArgument):
            upsample_linear(x, np.zeros((4, 2)), w,
                            DiffBuffer(np.zeros((2, 6))))


class TestRelu:
    def test_clamps_negatives(self):
        x = DiffBuffer(np.array([[-1.0, 2.0], [0.0, -3.0]]))
        np.testing.assert_array_equal(relu(x).value, [[0, 2], [0, 0]])

    def test_gradient_masks_negative_entries(self):
        rng = np.random.default_rng(2)
        xv = rng.standard_normal((5, 4))
        xv[np.abs(xv) < 0.1] += 0.5  # keep entries away from the kink
        probe = rng.standard_normal((5, 4))

        def fwd():
            x = DiffBuffer(xv)
            return x, weighted_sum(relu(x), probe)

        x, loss = fwd()
        loss.backward()
        num = numeric_grad(lambda: fwd()[1].value.item(), xv)
        assert rel_err(x.grad, num) < 1e-6


class TestMaxpoolRows:
    def test_value_and_tie_routing(self):
        x = DiffBuffer(np.array([[1.0, 5.0], [3.0, 5.0]]))
        out = maxpool_rows(x)
        np.testing.assert_array_equal(out.value, [[3.0, 5.0]])
        loss = weighted_sum(out, np.ones((1, 2)))
        loss.backward()
        # column 1 ties between rows: gradient goes to the lowest row index
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(10 + seed)
        xv = rng.standard_normal((6, 3))
        # require a clear winner per column so h cannot flip the argmax
        top2 = np.sort(xv, axis=0)[-2:]
        assert (top2[1] - top2[0] > 1e-4).all()
        probe = rng.standard_normal((1, 3))

        def fwd():
            x = DiffBuffer(xv)
            return x, weighted_sum(maxpool_rows(x), probe)

        x, loss = fwd()
        loss.backward()
        num = numeric_grad(lambda: fwd()[1].value.item(), xv)
        assert rel_err(x.grad, num) < 1e-6


class TestEdgeAggregate:
    def test_two_point_hand_case(self):
        x = DiffBuffer(np.array([[0.0], [10.0]]))
        nbr = np.array([[1], [0]])
        out = edge_aggregate(x, nbr)
        np.testing.assert_array_equal(out.value, [[10.0], [-10.0]])

    def test_backward_routes_plus_minus(self):
        x = DiffBuffer(np.array([[0.0], [10.0]]))
        out = edge_aggregate(x, np.array([[1], [0]]))
        loss = weighted_sum(out, np.array([[1.0], [0.0]]))
        loss.backward()
        # out[0] = x1 - x0: +1 to the neighbor, -1 to the center
        np.testing.assert_array_equal(x.grad, [[-1.0], [1.0]])

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(20 + seed)
        n, k, d = 7, 3, 4
        xv = rng.standard_normal((n, d))
        nbr = np.stack([rng.permutation(n)[:k] for _ in range(n)])
        probe = rng.standard_normal((n, d))

        def fwd():
            x = DiffBuffer(xv)
            return x, weighted_sum(edge_aggregate(x, nbr), probe)

        # selection-stability guard: re-derive winners at the fd scale
        gaps = []
        for i in range(n):
            cand = xv[nbr[i]]  # (k, d)
            srt = np.sort(cand, axis=0)
            gaps.append(srt[-1] - srt[-2] if k > 1 else np.full(d, np.inf))
        assert np.min(gaps) > 1e-4

        x, loss = fwd()
        loss.backward()
        num = numeric_grad(lambda: fwd()[1].value.item(), xv)
        assert rel_err(x.grad, num) < 1e-6


class TestConcatTile:
    def test_rows_gain_global_suffix(self):
        local = DiffBuffer(np.array([[1.0, 2, 3], [4, 5, 6]]))
        global_ = DiffBuffer(np.array([[7.0, 8, 9]]))
        out = concat_tile(local, global_)
        np.testing.assert_array_equal(
            out.value, [[1, 2, 3, 7, 8, 9], [4, 5, 6, 7, 8, 9]]
        )

    def test_backward_sums_global_rows(self):
        local = DiffBuffer(np.ones((3, 2)))
        global_ = DiffBuffer(np.ones((1, 2)))
        loss = weighted_sum(concat_tile(local, global_), np.ones((3, 4)))
        loss.backward()
        np.testing.assert_array_equal(local.grad, np.ones((3, 2)))
        np.testing.assert_array_equal(global_.grad, [[3.0, 3.0]])


class TestRepeatAndConcatCols:
    def test_repeat_rows_layout(self):
        x = DiffBuffer(np.array([[1.0, 2], [3, 4]]))
        out = repeat_rows(x, 3)
        np.testing.assert_array_equal(
            out.value, [[1, 2]] * 3 + [[3, 4]] * 3
        )

    def test_repeat_backward_sums_replicas(self):
        x = DiffBuffer(np.array([[1.0, 2], [3, 4]]))
        out = repeat_rows(x, 2)
        g = np.arange(8, dtype=float).reshape(4, 2)
        weighted_sum(out, g).backward()
        np.testing.assert_array_equal(x.grad, [[0 + 2, 1 + 3], [4 + 6, 5 + 7]])

    @pytest.mark.parametrize("seed", range(3))
    def test_concat_cols_gradient(self, seed):
        rng = np.random.default_rng(30 + seed)
        av, bv = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
        probe = rng.standard_normal((4, 5))

        def fwd():
            a, b = DiffBuffer(av), DiffBuffer(bv)
            return a, b, weighted_sum(concat_cols(a, b), probe)

        a, b, loss = fwd()
        loss.backward()
        for buf, arr in [(a, av), (b, bv)]:
            num = numeric_grad(lambda: fwd()[2].value.item(), arr)
            assert rel_err(buf.grad, num) < 1e-6

    def test_add_gradient_is_identity_both_sides(self):
        av = np.ones((2, 2))
        a, b = DiffBuffer(av), DiffBuffer(av * 2)
        weighted_sum(add(a, b), np.ones((2, 2))).backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 2)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 2)))


class TestBatchedConsistency:
    """Ops applied to a stacked pair equal the stacked single results."""

    def test_linear_relu_maxpool_concat(self):
        rng = np.random.default_rng(5)
        x0, x1 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        wv, bv = rng.standard_normal((3, 2)), rng.standard_normal((1, 2))

        def single(xv):
            w, b = DiffBuffer(wv), DiffBuffer(bv)
            h = relu(linear(DiffBuffer(xv), w, b))
            return concat_tile(h, maxpool_rows(h)).value

        w, b = DiffBuffer(wv), DiffBuffer(bv)
        hb = relu(linear(DiffBuffer(np.stack([x0, x1])), w, b))
        batched = concat_tile(hb, maxpool_rows(hb)).value
        np.testing.assert_array_equal(batched[0], single(x0))
        np.testing.assert_array_equal(batched[1], single(x1))

    def test_edge_aggregate_batched(self):
        rng = np.random.default_rng(6)
        x0, x1 = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
        n0 = np.stack([rng.permutation(5)[:2] for _ in range(5)])
        n1 = np.stack([rng.permutation(5)[:2] for _ in range(5)])
        batched = edge_aggregate(
            DiffBuffer(np.stack([x0, x1])), np.stack([n0, n1])
        ).value
        np.testing.assert_array_equal(
            batched[0], edge_aggregate(DiffBuffer(x0), n0).value
        )
        np.testing.assert_array_equal(
            batched[1], edge_aggregate(DiffBuffer(x1), n1).value
        )

    def test_batched_linear_param_grad_is_sum_of_singles(self):
        rng = np.random.default_rng(7)
        x0, x1 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        wv = rng.standard_normal((2, 2))
        bv = rng.standard_normal((1, 2))
        probe = rng.standard_normal((3, 2))

        def single_grad(xv):
            w, b = DiffBuffer(wv), DiffBuffer(bv)
            weighted_sum(linear(DiffBuffer(xv), w, b), probe).backward()
            return w.grad.copy(), b.grad.copy()

        gw0, gb0 = single_grad(x0)
        gw1, gb1 = single_grad(x1)
        w, b = DiffBuffer(wv), DiffBuffer(bv)
        out = linear(DiffBuffer(np.stack([x0, x1])), w, b)
        weighted_sum(out, np.stack([probe, probe])).backward()
        np.testing.assert_allclose(w.grad, gw0 + gw1, atol=1e-12)
        np.testing.assert_allclose(b.grad, gb0 + gb1, atol=1e-12)


class TestBackwardDiscipline:
    def test_backward_twice_raises(self):
        x = DiffBuffer(np.ones((2, 2)))
        loss = weighted_sum(x, np.ones((2, 2)))
        loss.backward()
        with pytest.raises(InvalidArgument):
            loss.backward()

    def test_non_scalar_backward_raises(self):
        x = DiffBuffer(np.ones((2, 2)))
        with pytest.raises(InvalidArgument):
            relu(x).backward()

    def test_gradients_accumulate_across_graphs(self):
        x = DiffBuffer(np.ones((2, 2)))
        weighted_sum(relu(x), np.ones((2, 2))).backward()
        weighted_sum(relu(x), np.ones((2, 2))).backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones((2, 2)))
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))

    def test_diamond_graph_sums_paths(self):
        x = DiffBuffer(np.ones((1, 1)))
        y = add(x, x)  # two paths to x
        weighted_sum(y, np.ones((1, 1))).backward()
        np.testing.assert_array_equal(x.grad, [[2.0]])


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = DiffBuffer(np.array([[1.0, -2.0]]))
        opt = Adam([p], lr=0.1)
        p.grad  # allocate zeros
        opt.step()
        np.testing.assert_array_equal(p.value, [[1.0, -2.0]])
        np.testing.assert_array_equal(opt.m[0], np.zeros((1, 2)))
        assert opt.step_count == 1

    def test_constant_gradient_step_approaches_lr(self):
        p = DiffBuffer(np.zeros((1, 1)))
        opt = Adam([p], lr=5e-4)
        prev = p.value.copy()
        for _ in range(200):
            p.zero_grad()
            p.grad += 3.0
            opt.step()
            step = abs(float((p.value - prev).item()))
            prev = p.value.copy()
        # bias-corrected update with constant g tends to lr * g / |g|
        assert abs(step - 5e-4) / 5e-4 < 1e-3

    def test_nan_gradient_raises(self):
        p = DiffBuffer(np.zeros((1, 1)))
        opt = Adam([p])
        p.grad += np.nan
        with pytest.raises(TrainingDiverged):
            opt.step()

    def test_state_round_trip(self):
        rng = np.random.default_rng(0)
        p = DiffBuffer(rng.standard_normal((2, 2)))
        opt = Adam([p], lr=1e-3)
        for _ in range(3):
            p.zero_grad()
            p.grad += rng.standard_normal((2, 2))
            opt.step()
        q = DiffBuffer(p.value.copy())
        opt2 = Adam([q], lr=1e-3)
        opt2.load_state_dict(opt.state_dict())
        g = rng.standard_normal((2, 2))
        p.zero_grad(), q.zero_grad()
        p.grad += g
        q.grad += g
        opt.step(), opt2.step()
        np.testing.assert_array_equal(p.value, q.value)


class TestSchedule:
    def test_decay_every_20_epochs(self):
        assert scheduled_lr(5e-4, 0) == 5e-4
        assert scheduled_lr(5e-4, 19) == 5e-4
        assert scheduled_lr(5e-4, 20) == 5e-4 * 0.95
        assert scheduled_lr(5e-4, 40) == pytest.approx(5e-4 * 0.95**2)


class TestInit:
    def test_he_uniform_bounds_and_zero_layer(self):
        rng = np.random.default_rng(0)
        layer = he_uniform_layer(rng, 64, 32)
        limit = np.sqrt(6.0 / 64)
        assert np.abs(layer.weight.value).max() <= limit
        np.testing.assert_array_equal(layer.bias.value, np.zeros((1, 32)))
        zero = he_uniform_layer(rng, 4, 4, zero=True)
        np.testing.assert_array_equal(zero.weight.value, np.zeros((4, 4)))

    def test_seeded_init_reproducible(self):
        a = he_uniform_layer(np.random.default_rng(42), 8, 8)
        b = he_uniform_layer(np.random.default_rng(42), 8, 8)
        np.testing.assert_array_equal(a.weight.value, b.weight.value)
