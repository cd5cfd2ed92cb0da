"""Model families and architecture codes.

Codes follow the hidden-iterations-layers convention: "H-T-L" for the
population-gated recurrent family (e.g. 192-10-1), "H-L" for the set-linear
and sequence-LSTM baselines (e.g. 64-6).  Multi-layer stacks use the hidden
width between layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from swarmset import autodiff as ad
from swarmset.autodiff import Node, PopulationBatch
from swarmset.setlayers import (
    SeqLstmParams,
    SetLinearParams,
    entitywise_linear,
    init_seq_lstm,
    init_set_linear,
    relu_layer,
    seq_lstm_forward,
    set_linear_forward,
)
from swarmset.swarm import SwarmLayerParams, init_swarm, swarm_stack_forward

MODEL_FAMILIES = ("swarm", "setlinear", "setlinear_max", "seqlstm")


class ArchCodeError(ValueError):
    """Architecture code does not parse for the given family."""


def parse_arch_code(family: str, code: str):
    """Split a code like "192-10-1" into its positive integer fields."""
    if family not in MODEL_FAMILIES:
        raise ArchCodeError(f"unknown model family {family!r}")
    parts = code.split("-")
    expected = 3 if family == "swarm" else 2
    if len(parts) != expected:
        raise ArchCodeError(f"{family} code must have {expected} fields, got {code!r}")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise ArchCodeError(f"non-integer field in architecture code {code!r}") from None
    if any(v < 1 for v in values):
        raise ArchCodeError(f"architecture code fields must be positive, got {code!r}")
    return tuple(values)


@dataclass
class SwarmModel:
    layers: list  # of SwarmLayerParams

    def forward(self, batch: PopulationBatch) -> PopulationBatch:
        return swarm_stack_forward(self.layers, batch)

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{n}", p) for n, p in layer.named_parameters())
        return out


@dataclass
class SetLinearModel:
    layers: list  # of SetLinearParams
    pool: str = "mean"

    def forward(self, batch: PopulationBatch) -> PopulationBatch:
        for i, layer in enumerate(self.layers):
            batch = set_linear_forward(layer, batch, pool=self.pool)
            if i + 1 < len(self.layers):
                batch = relu_layer(batch)
        return batch

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{n}", p) for n, p in layer.named_parameters())
        return out


@dataclass
class SeqLstmModel:
    lstm: SeqLstmParams
    head_w: Node
    head_b: Node

    def forward(self, batch: PopulationBatch) -> PopulationBatch:
        hidden = seq_lstm_forward(self.lstm, batch)
        return entitywise_linear(self.head_w, self.head_b, hidden)

    def named_parameters(self):
        out = list(self.lstm.named_parameters())
        out.extend([("head_w", self.head_w), ("head_b", self.head_b)])
        return out


def build_model(family: str, code: str, d_in: int, d_out: int,
                rng: np.random.Generator, dtype=np.float32, pooling: str = "mean"):
    fields = parse_arch_code(family, code)
    if family == "swarm":
        hidden, iterations, n_layers = fields
        layers = []
        for i in range(n_layers):
            li = d_in if i == 0 else hidden
            lo = d_out if i == n_layers - 1 else hidden
            layers.append(init_swarm(li, lo, hidden, iterations, pooling, rng, dtype=dtype))
        return SwarmModel(layers)
    if family in ("setlinear", "setlinear_max"):
        hidden, n_layers = fields
        layers = []
        for i in range(n_layers):
            li = d_in if i == 0 else hidden
            lo = d_out if i == n_layers - 1 else hidden
            layers.append(init_set_linear(li, lo, rng, dtype=dtype))
        return SetLinearModel(layers, pool="max" if family == "setlinear_max" else "mean")
    if family == "seqlstm":
        hidden, n_layers = fields
        lstm = init_seq_lstm(d_in, hidden, n_layers, rng, dtype=dtype)
        bound = 1.0 / np.sqrt(hidden)
        head_w = ad.parameter(rng.uniform(-bound, bound, size=(d_out, hidden)), dtype=dtype)
        head_b = ad.parameter(np.zeros(d_out), dtype=dtype)
        return SeqLstmModel(lstm, head_w, head_b)
    raise ArchCodeError(f"unknown model family {family!r}")


def param_count(model) -> int:
    return int(sum(p.value.size for _, p in model.named_parameters()))


def analytic_param_count(family: str, code: str, d_in: int, d_out: int) -> int:
    """Closed-form parameter count; must agree with the instantiated model."""
    fields = parse_arch_code(family, code)
    if family == "swarm":
        hidden, _, n_layers = fields
        total = 0
        for i in range(n_layers):
            li = d_in if i == 0 else hidden
            lo = d_out if i == n_layers - 1 else hidden
            total += 4 * (hidden * li + hidden * hidden + hidden * hidden + hidden)
            total += lo * 2 * hidden + lo
        return total
    if family in ("setlinear", "setlinear_max"):
        hidden, n_layers = fields
        total = 0
        for i in range(n_layers):
            li = d_in if i == 0 else hidden
            lo = d_out if i == n_layers - 1 else hidden
            total += 2 * lo * li + lo
        return total
    if family == "seqlstm":
        hidden, n_layers = fields
        total = 0
        for i in range(n_layers):
            li = d_in if i == 0 else hidden
            total += 4 * (hidden * li + hidden * hidden + hidden)
        total += d_out * hidden + d_out
        return total
    raise ArchCodeError(f"unknown model family {family!r}")
