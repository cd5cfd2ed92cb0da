"""Population-pooled recurrent set layer.

The cell is a gated (LSTM-style) update whose gate pre-activations receive,
next to the entity input and the entity's own hidden state, a pooled
population input shared machinery-wise by all entities.  A layer applies the
cell a fixed number of iterations to the whole population with shared
weights, re-presenting the input every iteration, and maps the concatenated
(hidden, cell) state entity-wise to the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from swarmset import autodiff as ad
from swarmset.autodiff import Node, PopulationBatch, ShapeError

POOLINGS = ("mean", "causal")
_GATES = ("input", "forget", "output", "update")


@dataclass
class SwarmGate:
    w_in: Node   # [H, d_x]
    w_rec: Node  # [H, H]
    w_pop: Node  # [H, H]
    bias: Node   # [H]


@dataclass
class SwarmCellParams:
    """Gate weights of one cell; `update` is the candidate-state gate and
    receives the same population term as the sigmoid gates."""

    gates: dict

    @property
    def hidden_size(self) -> int:
        return self.gates["input"].w_rec.shape[0]

    @property
    def d_in(self) -> int:
        return self.gates["input"].w_in.shape[1]

    def named_parameters(self):
        out = []
        for gname in _GATES:
            g = self.gates[gname]
            out.extend([
                (f"{gname}.w_in", g.w_in),
                (f"{gname}.w_rec", g.w_rec),
                (f"{gname}.w_pop", g.w_pop),
                (f"{gname}.bias", g.bias),
            ])
        return out


@dataclass
class SwarmState:
    """Hidden and cell arrays [B, H, N]; zero at padding positions."""

    h: Node
    c: Node


@dataclass
class SwarmLayerParams:
    cell: SwarmCellParams
    head_w: Node  # [d_y, 2H], consumes concat(h, c)
    head_b: Node  # [d_y]
    iterations: int
    pooling: str = "mean"

    @property
    def d_out(self) -> int:
        return self.head_w.shape[0]

    def named_parameters(self):
        out = [(f"cell.{n}", p) for n, p in self.cell.named_parameters()]
        out.extend([("head_w", self.head_w), ("head_b", self.head_b)])
        return out


def init_swarm(d_in: int, d_out: int, hidden: int, iterations: int, pooling: str,
               rng: np.random.Generator, dtype=np.float32) -> SwarmLayerParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights; zero biases except the
    forget gate, which starts at +1."""
    if min(d_in, d_out, hidden, iterations) < 1:
        raise ValueError("dimensions and iteration count must be positive")
    if pooling not in POOLINGS:
        raise ValueError(f"unknown pooling {pooling!r}")

    def mat(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return ad.parameter(rng.uniform(-bound, bound, size=(rows, cols)), dtype=dtype)

    gates = {}
    for gname in _GATES:
        bias = np.ones(hidden) if gname == "forget" else np.zeros(hidden)
        gates[gname] = SwarmGate(
            w_in=mat(hidden, d_in),
            w_rec=mat(hidden, hidden),
            w_pop=mat(hidden, hidden),
            bias=ad.parameter(bias, dtype=dtype),
        )
    return SwarmLayerParams(
        cell=SwarmCellParams(gates),
        head_w=mat(d_out, 2 * hidden),
        head_b=ad.parameter(np.zeros(d_out), dtype=dtype),
        iterations=iterations,
        pooling=pooling,
    )


def zero_state(batch: PopulationBatch, hidden: int) -> SwarmState:
    shape = (batch.batch_size, hidden, batch.n_entities)
    dtype = batch.array.dtype
    return SwarmState(ad.constant(np.zeros(shape, dtype=dtype)), ad.constant(np.zeros(shape, dtype=dtype)))


def population_input(h: Node, batch: PopulationBatch, pooling: str) -> Node:
    """The pooled population term: the mean hidden state shared by every
    entity, or the strict-prefix running mean in the causal variant."""
    if pooling == "mean":
        pooled = ad.masked_mean(h, batch.lengths)
        return ad.broadcast_entities(pooled, batch.lengths, batch.n_entities)
    if pooling == "causal":
        return ad.causal_mean(h, batch.lengths)
    raise ValueError(f"unknown pooling {pooling!r}")


def swarm_cell_step(params: SwarmCellParams, x: PopulationBatch, state: SwarmState,
                    pooling: str = "mean") -> SwarmState:
    """One synchronous update of all entities.

    The population input is computed from the state entering the step and
    used simultaneously by every entity.
    """
    h, c = state.h, state.c
    if h.shape != (x.batch_size, params.hidden_size, x.n_entities):
        raise ShapeError(f"state shape {h.shape} does not match batch "
                         f"({x.batch_size}, {params.hidden_size}, {x.n_entities})")
    p = population_input(h, x, pooling)
    mask = x.mask(dtype=x.array.dtype)[:, None, :]

    def pre(gate: SwarmGate) -> Node:
        lin = ad.add(ad.dot_feature(gate.w_in, x.node), ad.dot_feature(gate.w_rec, h))
        lin = ad.add(lin, ad.dot_feature(gate.w_pop, p))
        return ad.add(lin, ad.reshape(gate.bias, (1, -1, 1)))

    gate_i = ad.sigmoid(pre(params.gates["input"]))
    gate_f = ad.sigmoid(pre(params.gates["forget"]))
    gate_o = ad.sigmoid(pre(params.gates["output"]))
    candidate = ad.tanh(pre(params.gates["update"]))
    c_new = ad.add(ad.mul(gate_f, c), ad.mul(gate_i, candidate))
    c_new = ad.mul(c_new, mask)
    h_new = ad.mul(ad.mul(gate_o, ad.tanh(c_new)), mask)
    return SwarmState(h_new, c_new)


def swarm_layer_forward(params: SwarmLayerParams, x: PopulationBatch) -> PopulationBatch:
    """Iterate the cell from zero state with the same input every iteration,
    then map concat(h, c) entity-wise through the shared output head."""
    if x.n_features != params.cell.d_in:
        raise ShapeError(f"layer expects {params.cell.d_in} features, batch has {x.n_features}")
    state = zero_state(x, params.cell.hidden_size)
    for _ in range(params.iterations):
        state = swarm_cell_step(params.cell, x, state, params.pooling)
    stacked = ad.concat_features(state.h, state.c)
    y = ad.add(ad.dot_feature(params.head_w, stacked), ad.reshape(params.head_b, (1, -1, 1)))
    mask = x.mask(dtype=x.array.dtype)[:, None, :]
    return PopulationBatch(ad.mul(y, mask), x.lengths)


def swarm_stack_forward(layers, x: PopulationBatch) -> PopulationBatch:
    """Apply layers sequentially with an entity-wise ReLU between them (none
    after the last)."""
    for idx, layer in enumerate(layers):
        if x.n_features != layer.cell.d_in:
            raise ShapeError(f"layer {idx} expects {layer.cell.d_in} features, got {x.n_features}")
        x = swarm_layer_forward(layer, x)
        if idx + 1 < len(layers):
            x = PopulationBatch(ad.relu(x.node), x.lengths)
    return x
