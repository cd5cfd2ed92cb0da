"""Training losses and probe-map evaluation.

Two objectives: Hungarian-matched per-point cross-entropy for direct cluster
assignment (the matching is recomputed every call from the current logits and
treated as a constant of the gradient), and mixture-of-Gaussians negative
log-likelihood for the parametrized task.  Probe maps evaluate the model on a
population augmented by one hypothetical entity over a grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from swarmset import autodiff as ad
from swarmset.autodiff import Node, PopulationBatch
from swarmset.assignment import build_cluster_cost, hungarian_solve
from swarmset.taskgen import ClusterTask

LOG_STD_CLAMP = 7.0


@dataclass
class LossReport:
    """Per-task loss: mean per-point value plus the matching used."""

    value: float
    matched_perm: list
    n_points: int
    diverged: bool = False
    node: Node | None = field(default=None, repr=False)


@dataclass
class MoGParams:
    """Decoded mixture head: [2, K] means, [2, K] log stds (diagonal), and
    pre-softmax component weights."""

    means: Node
    log_stds: Node
    logits_w: Node

    @property
    def n_components(self) -> int:
        return self.logits_w.shape[0]


def direct_clustering_loss(logits, labels) -> LossReport:
    """Mean per-point cross-entropy under the optimal cluster-label matching.

    `logits` is [K, N] (array or Node).  When a Node is passed, the returned
    report carries a differentiable scalar in `.node`; the discrete matching
    contributes no gradient.
    """
    node = logits if isinstance(logits, Node) else None
    values = np.asarray(logits.value if node is not None else logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = values.shape[1]
    if not np.isfinite(values).all():
        return LossReport(value=float("nan"), matched_perm=list(range(values.shape[0])),
                          n_points=n, diverged=True)
    result = hungarian_solve(build_cluster_cost(values, labels))
    report = LossReport(value=result.total_cost / n, matched_perm=result.perm, n_points=n)
    if node is not None:
        k = values.shape[0]
        inv_perm = np.empty(k, dtype=np.int64)
        inv_perm[result.perm] = np.arange(k)
        targets = np.zeros((k, n))
        targets[inv_perm[labels], np.arange(n)] = 1.0 / n
        report.node = ad.neg(ad.sum_all(ad.mul(ad.log_softmax(node, axis=0), targets)))
    return report


def matched_cross_entropy(logits: Node, label_lists, lengths):
    """Batched matched loss over [B, K, N] logits.

    Returns (scalar Node, per-task LossReports).  The batch objective is the
    mean over tasks of the per-task per-point means, so large tasks do not
    outweigh small ones.
    """
    values = logits.value
    b, k, _ = values.shape
    targets = np.zeros_like(values, dtype=np.float64)
    reports = []
    for t in range(b):
        n = int(lengths[t])
        labels = np.asarray(label_lists[t], dtype=np.int64)
        task_vals = np.asarray(values[t, :, :n], dtype=np.float64)
        if not np.isfinite(task_vals).all():
            reports.append(LossReport(float("nan"), list(range(k)), n, diverged=True))
            continue
        result = hungarian_solve(build_cluster_cost(task_vals, labels))
        inv_perm = np.empty(k, dtype=np.int64)
        inv_perm[result.perm] = np.arange(k)
        targets[t, inv_perm[labels], np.arange(n)] = 1.0 / (b * n)
        reports.append(LossReport(result.total_cost / n, result.perm, n))
    with np.errstate(all="ignore"):  # non-finite logits must flow to the divergence check
        loss = ad.neg(ad.sum_all(ad.mul(ad.log_softmax(logits, axis=1), targets.astype(values.dtype))))
    return loss, reports


def mog_param_dim(n_clust: int, n_dim: int = 2) -> int:
    """Width of the flat mixture parameter vector: one mean and one scale per
    dimension plus one weight logit, per cluster."""
    return n_clust * (2 * n_dim + 1)


def decode_mog(raw: Node) -> MoGParams:
    """Slice a flat [5K] vector into per-cluster (mean, log std, weight logit).

    Log stds are clamped to [-7, 7] before use.
    """
    raw = ad.as_node(raw)
    d = raw.shape[0]
    if raw.value.ndim != 1 or d % 5 != 0 or d == 0:
        raise ValueError(f"mixture vector must be flat with 5 entries per cluster, got shape {raw.shape}")
    k = d // 5
    grid = ad.reshape(raw, (k, 5))
    means = ad.transpose2d(ad.take(grid, (slice(None), slice(0, 2))))
    log_stds = ad.clip(ad.transpose2d(ad.take(grid, (slice(None), slice(2, 4)))), -LOG_STD_CLAMP, LOG_STD_CLAMP)
    logits_w = ad.reshape(ad.take(grid, (slice(None), slice(4, 5))), (k,))
    return MoGParams(means=means, log_stds=log_stds, logits_w=logits_w)


def mog_nll(params: MoGParams, points: np.ndarray) -> Node:
    """Mean per-point negative log-likelihood of a diagonal Gaussian mixture,
    with log-sum-exp stabilization over components."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] != 2:
        raise ValueError(f"points must be [2, N], got shape {pts.shape}")
    n = pts.shape[1]
    k = params.n_components
    x = ad.constant(pts[:, None, :].astype(params.means.value.dtype))          # [2, 1, N]
    mu = ad.reshape(params.means, (2, k, 1))
    inv_std = ad.exp(ad.neg(ad.reshape(params.log_stds, (2, k, 1))))
    z = ad.mul(ad.sub(x, mu), inv_std)
    sq = ad.sum_axis(ad.mul(z, z), axis=0)                                     # [K, N]
    sum_log_std = ad.reshape(ad.sum_axis(params.log_stds, axis=0), (k, 1))
    log_dens = ad.sub(ad.mul(sq, -0.5), ad.add(sum_log_std, math.log(2.0 * math.pi)))
    log_w = ad.reshape(ad.log_softmax(params.logits_w, axis=0), (k, 1))
    log_mix = ad.logsumexp(ad.add(log_dens, log_w), axis=0)                    # [N]
    return ad.neg(ad.mul(ad.sum_all(log_mix), 1.0 / n))


def mean_pool_head(y: PopulationBatch) -> Node:
    """Set-invariant readout: masked mean over entities, [B, D, N] -> [B, D]."""
    return ad.masked_mean(y.node, y.lengths)


def probe_cluster_probabilities(forward, task: ClusterTask, grid: np.ndarray,
                                chunk: int = 256, dtype=np.float32) -> np.ndarray:
    """Cluster-assignment probabilities for a hypothetical extra entity.

    Each grid point is appended to the task's population, the model runs on
    the augmented set, and the softmax over that entity's logits is returned:
    [len(grid), K].
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[1] != 2:
        raise ValueError(f"grid must be [G, 2], got shape {grid.shape}")
    n = task.n_points
    out = []
    with ad.no_grad():
        for start in range(0, grid.shape[0], chunk):
            probes = grid[start:start + chunk]
            g = probes.shape[0]
            values = np.zeros((g, 2, n + 1), dtype=dtype)
            values[:, :, :n] = task.points
            values[:, :, n] = probes
            batch = PopulationBatch(values, [n + 1] * g)
            logits = forward(batch).array[:, :, n].astype(np.float64)
            m = logits.max(axis=1, keepdims=True)
            probs = np.exp(logits - m)
            probs /= probs.sum(axis=1, keepdims=True)
            out.append(probs)
    return np.concatenate(out, axis=0)


def assignment_entropy_map(forward, task: ClusterTask, grid: np.ndarray,
                           chunk: int = 256, dtype=np.float32) -> np.ndarray:
    """Shannon entropy (nats) of the probe assignment distribution per grid point."""
    probs = probe_cluster_probabilities(forward, task, grid, chunk=chunk, dtype=dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return -plogp.sum(axis=1)
