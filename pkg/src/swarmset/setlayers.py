"""Baseline set layers: the linear set-equivariant map (entity-wise transform
plus a shared pooled term), entity-wise building blocks, and the
non-equivariant sequence-LSTM baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from swarmset import autodiff as ad
from swarmset.autodiff import Node, PopulationBatch, ShapeError


@dataclass
class SetLinearParams:
    """y_i = w_entity @ x_i + w_pool @ pool(x) + bias.

    Parametrized directly in (entity matrix, pool matrix) form: with mean
    pooling this spans the same function family as splitting the map into
    diagonal and off-diagonal blocks, and the output scale is independent of
    the population size.
    """

    w_entity: Node
    w_pool: Node
    bias: Node

    @property
    def d_in(self) -> int:
        return self.w_entity.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_entity.shape[0]

    def named_parameters(self):
        return [("w_entity", self.w_entity), ("w_pool", self.w_pool), ("bias", self.bias)]


def init_set_linear(d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32) -> SetLinearParams:
    bound = 1.0 / np.sqrt(d_in)
    return SetLinearParams(
        w_entity=ad.parameter(rng.uniform(-bound, bound, size=(d_out, d_in)), dtype=dtype),
        w_pool=ad.parameter(rng.uniform(-bound, bound, size=(d_out, d_in)), dtype=dtype),
        bias=ad.parameter(np.zeros(d_out), dtype=dtype),
    )


def _masked(values: Node, batch: PopulationBatch) -> Node:
    """Re-zero padding positions (bias terms and pooled broadcasts unzero them)."""
    mask = batch.mask(dtype=values.value.dtype)[:, None, :]
    return ad.mul(values, mask)


def set_linear_forward(params: SetLinearParams, x: PopulationBatch, pool: str = "mean") -> PopulationBatch:
    """Linear set-equivariant layer with mean or max population pooling."""
    if x.n_features != params.d_in:
        raise ShapeError(f"layer expects {params.d_in} features, batch has {x.n_features}")
    if pool == "mean":
        pooled = ad.masked_mean(x.node, x.lengths)
    elif pool == "max":
        pooled = ad.masked_max(x.node, x.lengths)
    else:
        raise ValueError(f"unknown pool {pool!r}")
    per_entity = ad.dot_feature(params.w_entity, x.node)
    shared = ad.dot_feature(params.w_pool, ad.broadcast_entities(pooled, x.lengths, x.n_entities))
    y = ad.add(ad.add(per_entity, shared), ad.reshape(params.bias, (1, params.d_out, 1)))
    return PopulationBatch(_masked(y, x), x.lengths)


def relu_layer(x: PopulationBatch) -> PopulationBatch:
    """Entity-wise ReLU; padding stays zero."""
    return PopulationBatch(ad.relu(x.node), x.lengths)


def entitywise_linear(w: Node, b: Node, x: PopulationBatch) -> PopulationBatch:
    """Shared per-entity affine map (a 1x1 convolution over the entity axis)."""
    if w.shape[1] != x.n_features:
        raise ShapeError(f"weight expects {w.shape[1]} features, batch has {x.n_features}")
    y = ad.add(ad.dot_feature(w, x.node), ad.reshape(b, (1, w.shape[0], 1)))
    return PopulationBatch(_masked(y, x), x.lengths)


# ---------------------------------------------------------------------------
# sequence-LSTM baseline (intentionally not set-equivariant)
# ---------------------------------------------------------------------------


@dataclass
class LstmGate:
    w_in: Node
    w_rec: Node
    bias: Node


_GATES = ("input", "forget", "output", "update")


@dataclass
class SeqLstmParams:
    """Standard LSTM stack run over the entity axis as if it were a sequence."""

    layers: list = field(default_factory=list)  # per layer: {gate name: LstmGate}

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden_size(self) -> int:
        return self.layers[0]["input"].w_rec.shape[0]

    def named_parameters(self):
        out = []
        for li, gates in enumerate(self.layers):
            for gname in _GATES:
                gate = gates[gname]
                out.append((f"layer{li}.{gname}.w_in", gate.w_in))
                out.append((f"layer{li}.{gname}.w_rec", gate.w_rec))
                out.append((f"layer{li}.{gname}.bias", gate.bias))
        return out


def init_seq_lstm(d_in: int, hidden: int, n_layers: int, rng: np.random.Generator, dtype=np.float32) -> SeqLstmParams:
    layers = []
    for li in range(n_layers):
        fan = d_in if li == 0 else hidden
        bound = 1.0 / np.sqrt(fan)
        gates = {}
        for gname in _GATES:
            bias = np.ones(hidden) if gname == "forget" else np.zeros(hidden)
            gates[gname] = LstmGate(
                w_in=ad.parameter(rng.uniform(-bound, bound, size=(hidden, fan)), dtype=dtype),
                w_rec=ad.parameter(rng.uniform(-bound, bound, size=(hidden, hidden)), dtype=dtype),
                bias=ad.parameter(bias, dtype=dtype),
            )
        layers.append(gates)
    return SeqLstmParams(layers)


def _lstm_step(gates: dict, x_t: Node, h: Node, c: Node):
    """One LSTM step on [B, d] slices; returns (h', c')."""

    def pre(g: LstmGate) -> Node:
        lin = ad.add(ad.matmul(x_t, ad.transpose2d(g.w_in)), ad.matmul(h, ad.transpose2d(g.w_rec)))
        return ad.add(lin, ad.reshape(g.bias, (1, -1)))

    i = ad.sigmoid(pre(gates["input"]))
    f = ad.sigmoid(pre(gates["forget"]))
    o = ad.sigmoid(pre(gates["output"]))
    u = ad.tanh(pre(gates["update"]))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, u))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def seq_lstm_forward(params: SeqLstmParams, x: PopulationBatch) -> PopulationBatch:
    """Scan the LSTM stack over entities in storage order.

    The output depends on entity order by construction; this is the
    non-equivariant baseline for the shuffle-variance study.  Outputs at
    padding positions are zeroed.
    """
    B = x.batch_size
    H = params.hidden_size
    dtype = x.array.dtype
    seq = x.node
    for gates in params.layers:
        h = ad.constant(np.zeros((B, H), dtype=dtype))
        c = ad.constant(np.zeros((B, H), dtype=dtype))
        outputs = []
        for t in range(x.n_entities):
            x_t = ad.take(seq, (slice(None), slice(None), t))
            h, c = _lstm_step(gates, x_t, h, c)
            outputs.append(ad.reshape(h, (B, H, 1)))
        seq = ad.concat_entities(outputs)
    mask = x.mask(dtype=dtype)[:, None, :]
    return PopulationBatch(ad.mul(seq, mask), x.lengths)
