"""Population-gated cell and layer tests: scalar-loop oracles, equivariance,
duplicate-entity consistency, the causal variant, and gradient checks."""

import numpy as np
import pytest

from swarmset import autodiff as ad
from swarmset.autodiff import Node, PopulationBatch
from swarmset.swarm import (
    SwarmCellParams,
    SwarmGate,
    SwarmLayerParams,
    SwarmState,
    init_swarm,
    swarm_cell_step,
    swarm_layer_forward,
    swarm_stack_forward,
    zero_state,
)

from helpers import check_grads, equivariance_gap


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def loop_cell_step(params, x, h, c, lengths):
    """Per-entity scalar-loop oracle; population term by explicit summation."""
    B, _, N = x.shape
    H = h.shape[1]
    h2 = np.zeros_like(h)
    c2 = np.zeros_like(c)
    for b in range(B):
        L = lengths[b]
        p = np.zeros(H)
        for i in range(L):
            p = p + h[b, :, i]
        p = p / L
        for i in range(L):
            def pre(g):
                return g.w_in.value @ x[b, :, i] + g.w_rec.value @ h[b, :, i] + g.w_pop.value @ p + g.bias.value

            gi = _sigmoid(pre(params.gates["input"]))
            gf = _sigmoid(pre(params.gates["forget"]))
            go = _sigmoid(pre(params.gates["output"]))
            u = np.tanh(pre(params.gates["update"]))
            c2[b, :, i] = gf * c[b, :, i] + gi * u
            h2[b, :, i] = go * np.tanh(c2[b, :, i])
    return h2, c2


def loop_layer_forward(params, x, lengths):
    """Fully unrolled scalar oracle for the layer."""
    B, _, N = x.shape
    H = params.cell.hidden_size
    h = np.zeros((B, H, N))
    c = np.zeros((B, H, N))
    for _ in range(params.iterations):
        h, c = loop_cell_step(params.cell, x, h, c, lengths)
    y = np.zeros((B, params.d_out, N))
    for b in range(B):
        for i in range(lengths[b]):
            y[b, :, i] = params.head_w.value @ np.concatenate([h[b, :, i], c[b, :, i]]) + params.head_b.value
    return y


def zero_weight_layer(d_in, d_out, hidden, iterations, head_b=None, pooling="mean"):
    gates = {g: SwarmGate(Node(np.zeros((hidden, d_in))), Node(np.zeros((hidden, hidden))),
                          Node(np.zeros((hidden, hidden))), Node(np.zeros(hidden)))
             for g in ("input", "forget", "output", "update")}
    hb = np.zeros(d_out) if head_b is None else np.asarray(head_b, dtype=np.float64)
    return SwarmLayerParams(SwarmCellParams(gates), Node(np.zeros((d_out, 2 * hidden))),
                            Node(hb), iterations, pooling)


def batch_of(points, dtype=np.float64, lengths=None):
    arr = np.asarray(points, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    return PopulationBatch(arr, lengths or [arr.shape[2]] * arr.shape[0])


def swarm_from_nodes(nodes, iterations, pooling="mean"):
    """Rebuild layer params from nodes in named_parameters order."""
    it = iter(nodes)
    gates = {g: SwarmGate(next(it), next(it), next(it), next(it))
             for g in ("input", "forget", "output", "update")}
    return SwarmLayerParams(SwarmCellParams(gates), next(it), next(it), iterations, pooling)


class TestCellStep:
    def test_zero_weights_hand_check(self):
        rng = np.random.default_rng(0)
        layer = zero_weight_layer(2, 3, 4, 1)
        x = batch_of(rng.standard_normal((2, 5)))
        c0 = rng.standard_normal((1, 4, 5))
        state = SwarmState(ad.constant(np.zeros((1, 4, 5))), ad.constant(c0))
        out = swarm_cell_step(layer.cell, x, state)
        np.testing.assert_allclose(out.c.value, 0.5 * c0, rtol=1e-15)
        np.testing.assert_allclose(out.h.value, 0.5 * np.tanh(0.5 * c0), rtol=1e-15)

    def test_single_entity_collapses_to_lstm_with_merged_recurrence(self):
        rng = np.random.default_rng(1)
        layer = init_swarm(2, 3, 4, 1, "mean", rng, dtype=np.float64)
        x = rng.standard_normal((2, 1))
        h0 = rng.standard_normal((1, 4, 1))
        c0 = rng.standard_normal((1, 4, 1))
        batch = batch_of(x)
        out = swarm_cell_step(layer.cell, batch, SwarmState(Node(h0), Node(c0)))

        def merged_pre(g):
            return g.w_in.value @ x[:, 0] + (g.w_rec.value + g.w_pop.value) @ h0[0, :, 0] + g.bias.value

        gi = _sigmoid(merged_pre(layer.cell.gates["input"]))
        gf = _sigmoid(merged_pre(layer.cell.gates["forget"]))
        go = _sigmoid(merged_pre(layer.cell.gates["output"]))
        u = np.tanh(merged_pre(layer.cell.gates["update"]))
        c_ref = gf * c0[0, :, 0] + gi * u
        h_ref = go * np.tanh(c_ref)
        np.testing.assert_allclose(out.c.value[0, :, 0], c_ref, atol=1e-12)
        np.testing.assert_allclose(out.h.value[0, :, 0], h_ref, atol=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        layer = init_swarm(3, 2, 4, 1, "mean", rng, dtype=np.float64)
        x = rng.standard_normal((2, 3, 5))
        h0 = rng.standard_normal((2, 4, 5))
        c0 = rng.standard_normal((2, 4, 5))
        lengths = [5, 3]
        mask = ad.entity_mask(np.asarray(lengths), 5)[:, None, :]
        h0 *= mask
        c0 *= mask
        batch = PopulationBatch(x * mask, lengths)
        out = swarm_cell_step(layer.cell, batch, SwarmState(Node(h0), Node(c0)))
        h_ref, c_ref = loop_cell_step(layer.cell, x * mask, h0, c0, lengths)
        np.testing.assert_allclose(out.h.value, h_ref, atol=1e-12)
        np.testing.assert_allclose(out.c.value, c_ref, atol=1e-12)

    def test_state_shape_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        layer = init_swarm(2, 2, 4, 1, "mean", rng)
        batch = batch_of(np.zeros((2, 3)))
        with pytest.raises(ad.ShapeError):
            swarm_cell_step(layer.cell, batch, zero_state(batch, 5))


class TestLayerForward:
    def test_zero_weights_output_is_head_bias(self):
        layer = zero_weight_layer(2, 3, 4, 1, head_b=[1.0, -2.0, 0.5])
        out = swarm_layer_forward(layer, batch_of(np.random.default_rng(4).standard_normal((2, 6))))
        for i in range(6):
            np.testing.assert_array_equal(out.array[0, :, i], [1.0, -2.0, 0.5])

    def test_matches_unrolled_scalar_oracle(self):
        rng = np.random.default_rng(5)
        layer = init_swarm(2, 3, 2, 2, "mean", rng, dtype=np.float64)
        x = rng.standard_normal((1, 2, 3))
        out = swarm_layer_forward(layer, batch_of(x))
        ref = loop_layer_forward(layer, x, [3])
        np.testing.assert_allclose(out.array, ref, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 100])
    def test_equivariance_float32(self, n):
        rng = np.random.default_rng(6)
        layer = init_swarm(2, 3, 8, 10, "mean", rng, dtype=np.float32)
        x = rng.standard_normal((1, 2, n)).astype(np.float32)
        batch = PopulationBatch(x, [n])
        for _ in range(8):
            perm = rng.permutation(n)
            assert equivariance_gap(lambda b: swarm_layer_forward(layer, b), batch, perm) <= 1e-5

    def test_equivariance_float64(self):
        rng = np.random.default_rng(7)
        layer = init_swarm(2, 3, 8, 10, "mean", rng, dtype=np.float64)
        x = rng.standard_normal((1, 2, 100))
        batch = PopulationBatch(x, [100])
        for _ in range(8):
            perm = rng.permutation(100)
            assert equivariance_gap(lambda b: swarm_layer_forward(layer, b), batch, perm) <= 1e-10

    def test_cardinality_independence(self):
        rng = np.random.default_rng(8)
        layer = init_swarm(2, 3, 4, 3, "mean", rng, dtype=np.float64)
        for n in (1, 2, 17, 400):
            out = swarm_layer_forward(layer, batch_of(rng.standard_normal((2, n))))
            assert out.array.shape == (1, 3, n)
            assert np.isfinite(out.array).all()

    def test_duplicate_entity_consistency(self):
        rng = np.random.default_rng(9)
        layer = init_swarm(2, 3, 4, 4, "mean", rng, dtype=np.float64)
        x = rng.standard_normal((2, 6))
        dup = np.concatenate([x, x[:, 2:3]], axis=1)  # duplicate entity 2 at the end
        out = swarm_layer_forward(layer, batch_of(dup)).array[0]
        assert np.array_equal(out[:, 2], out[:, 6])

    def test_gradients_vs_fd(self):
        rng = np.random.default_rng(10)
        layer = init_swarm(2, 2, 3, 2, "mean", rng, dtype=np.float64)
        arrays = [n.value for _, n in layer.named_parameters()]
        x = rng.standard_normal((1, 2, 4))
        arrays.append(x)

        def loss(ps):
            params = swarm_from_nodes(ps[:-1], iterations=2)
            out = swarm_layer_forward(params, PopulationBatch(ps[-1], [4]))
            return ad.sum_all(ad.mul(out.node, out.node))

        check_grads(loss, arrays, rtol=1e-4)


class TestCausalVariant:
    def test_outputs_independent_of_later_entities_bitwise(self):
        rng = np.random.default_rng(11)
        layer = init_swarm(2, 3, 4, 3, "causal", rng, dtype=np.float64)
        x = rng.standard_normal((2, 7))
        base = swarm_layer_forward(layer, batch_of(x)).array
        for j in range(1, 7):
            bumped = x.copy()
            bumped[:, j:] = rng.standard_normal((2, 7 - j))
            out = swarm_layer_forward(layer, batch_of(bumped)).array
            assert np.array_equal(out[0, :, :j], base[0, :, :j])

    def test_causal_pooling_breaks_equivariance(self):
        rng = np.random.default_rng(12)
        layer = init_swarm(2, 3, 4, 3, "causal", rng, dtype=np.float64)
        x = rng.standard_normal((1, 2, 9))
        batch = PopulationBatch(x, [9])
        gaps = [equivariance_gap(lambda b: swarm_layer_forward(layer, b), batch, rng.permutation(9))
                for _ in range(5)]
        assert max(gaps) > 1e-4


class TestStack:
    def test_single_layer_stack_is_bitwise_identical(self):
        rng = np.random.default_rng(13)
        layer = init_swarm(2, 3, 4, 2, "mean", rng, dtype=np.float64)
        x = batch_of(rng.standard_normal((2, 5)))
        a = swarm_layer_forward(layer, x).array
        b = swarm_stack_forward([layer], x).array
        assert np.array_equal(a, b)

    def test_two_layers_stay_equivariant(self):
        rng = np.random.default_rng(14)
        l1 = init_swarm(2, 4, 4, 2, "mean", rng, dtype=np.float64)
        l2 = init_swarm(4, 3, 4, 2, "mean", rng, dtype=np.float64)
        x = rng.standard_normal((1, 2, 30))
        batch = PopulationBatch(x, [30])
        for _ in range(8):
            perm = rng.permutation(30)
            assert equivariance_gap(lambda b: swarm_stack_forward([l1, l2], b), batch, perm) <= 1e-10

    def test_two_zero_weight_layers_give_second_head_bias(self):
        l1 = zero_weight_layer(2, 3, 4, 2, head_b=[1.0, -1.0, 2.0])
        l2 = zero_weight_layer(3, 2, 4, 2, head_b=[0.25, -0.75])
        out = swarm_stack_forward([l1, l2], batch_of(np.ones((2, 4))))
        for i in range(4):
            np.testing.assert_array_equal(out.array[0, :, i], [0.25, -0.75])

    def test_dim_chain_mismatch(self):
        rng = np.random.default_rng(15)
        l1 = init_swarm(2, 4, 4, 1, "mean", rng)
        l2 = init_swarm(5, 3, 4, 1, "mean", rng)
        with pytest.raises(ad.ShapeError):
            swarm_stack_forward([l1, l2], batch_of(np.zeros((2, 3), dtype=np.float32)))


class TestInit:
    def test_shapes_and_forget_bias(self):
        rng = np.random.default_rng(16)
        layer = init_swarm(3, 5, 7, 4, "mean", rng)
        for gname, gate in layer.cell.gates.items():
            assert gate.w_in.shape == (7, 3)
            assert gate.w_rec.shape == (7, 7)
            assert gate.w_pop.shape == (7, 7)
            assert gate.bias.shape == (7,)
        assert layer.head_w.shape == (5, 14)
        assert layer.head_b.shape == (5,)
        np.testing.assert_array_equal(layer.cell.gates["forget"].bias.value, np.ones(7))
        np.testing.assert_array_equal(layer.cell.gates["input"].bias.value, np.zeros(7))

    def test_equal_seeds_are_bitwise_identical(self):
        a = init_swarm(2, 3, 4, 2, "mean", np.random.default_rng(99))
        b = init_swarm(2, 3, 4, 2, "mean", np.random.default_rng(99))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.value, pb.value)

    def test_rejects_bad_dims_and_pooling(self):
        rng = np.random.default_rng(17)
        with pytest.raises(ValueError):
            init_swarm(0, 3, 4, 2, "mean", rng)
        with pytest.raises(ValueError):
            init_swarm(2, 3, 4, 2, "sum", rng)
