"""Mini-batch Adam training with validation-driven checkpoint backtracking.

The backtracking heuristic: after each epoch past the warmup, count the run of
immediately preceding epochs whose validation loss beats the current one; if
that run is longer than `beta` times the elapsed epoch count, restore model
weights and optimizer state from the best checkpoint so far and multiply the
learning rate by `alpha`.  Divergent (non-finite) epochs take the same
restore path; more than 10 consecutive divergent epochs abort the run.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from swarmset import autodiff as ad
from swarmset import models as model_zoo
from swarmset.autodiff import no_grad
from swarmset.objectives import decode_mog, matched_cross_entropy, mean_pool_head, mog_nll
from swarmset.taskgen import tasks_to_batch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAX_CONSECUTIVE_DIVERGENCES = 10

_CKPT_MAGIC = b"SWRMCKPT"
_CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TrainingDiverged(RuntimeError):
    """Too many consecutive non-finite epochs."""


class CheckpointError(RuntimeError):
    """Missing or corrupt checkpoint file."""


@dataclass
class TrainConfig:
    batch_size: int = 50
    lr0: float = 1e-3
    alpha: float = 0.9
    beta: float = 0.2
    warmup_epochs: int = 5
    max_epochs: int = 10
    time_budget_s: float | None = None
    precision: int = 32
    seed: int = 0
    lr_decay_at: float | None = None   # fraction of max_epochs; one-off lr drop
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0 and 0.0 < self.beta < 1.0):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "batch_size", "lr0", "alpha", "beta", "warmup_epochs", "max_epochs",
            "time_budget_s", "precision", "seed", "lr_decay_at", "lr_decay_factor")}


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_model(cls, model) -> "AdamState":
        names = [(n, p) for n, p in model.named_parameters()]
        return cls(m={n: np.zeros_like(p.value) for n, p in names},
                   v={n: np.zeros_like(p.value) for n, p in names})


@dataclass
class TrainState:
    model: object
    adam: AdamState
    lr: float
    epoch: int = 0
    val_history: list = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("inf")
    best_path: str | None = None
    divergence_streak: int = 0
    backtracks: int = 0


def adam_step(state: TrainState, grads: dict) -> bool:
    """One bias-corrected Adam update.  Non-finite gradients skip the step
    (returns False) so a single bad batch cannot poison the parameters."""
    for g in grads.values():
        if not np.isfinite(g).all():
            return False
    state.adam.t += 1
    t = state.adam.t
    correct1 = 1.0 - ADAM_BETA1 ** t
    correct2 = 1.0 - ADAM_BETA2 ** t
    for name, param in state.model.named_parameters():
        g = grads[name]
        m = state.adam.m[name]
        v = state.adam.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / correct1
        v_hat = v / correct2
        param.value -= (state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(param.value.dtype, copy=False)
    return True


def backtrack_check(val_history, current_epoch: int, warmup: int, beta: float = 0.2) -> str:
    """Return "backtrack" when the run of immediately preceding epochs that
    all beat the current validation loss exceeds beta * elapsed epochs."""
    if not val_history:
        return "continue"
    current = val_history[-1]
    run = 0
    for loss in reversed(val_history[:-1]):
        if loss < current:
            run += 1
        else:
            break
    if current_epoch > warmup and run > beta * current_epoch:
        return "backtrack"
    return "continue"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, adam: AdamState, lr: float, epoch: int, config: TrainConfig,
                    model_spec: dict) -> None:
    """Container: magic, version, config hash, meta JSON, name table, raw
    little-endian arrays, CRC32 trailer."""
    named = list(model.named_parameters())
    arrays = [(n, p.value) for n, p in named]
    arrays += [(f"adam.m.{n}", adam.m[n]) for n, _ in named]
    arrays += [(f"adam.v.{n}", adam.v[n]) for n, _ in named]
    config_json = json.dumps(config.to_dict(), sort_keys=True)
    meta = json.dumps({
        "config": config.to_dict(),
        "model_spec": model_spec,
        "lr": lr,
        "epoch": epoch,
        "adam_t": adam.t,
    }, sort_keys=True).encode("utf-8")

    out = bytearray()
    out += _CKPT_MAGIC
    out += struct.pack("<I", _CKPT_VERSION)
    out += hashlib.sha256(config_json.encode("utf-8")).digest()
    out += struct.pack("<I", len(meta))
    out += meta
    out += struct.pack("<I", len(arrays))
    for name, _ in arrays:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
    for _, arr in arrays:
        code = _DTYPE_CODES[arr.dtype]
        out += struct.pack("<BB", code, arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path):
    """Returns (meta dict, {name: array}); corrupt or missing files raise
    CheckpointError with a diagnostic."""
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(_CKPT_MAGIC) + 8 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointError(f"{path} failed its CRC32 check")
    off = len(_CKPT_MAGIC)

    def unpack(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals if len(vals) > 1 else vals[0]

    version = unpack("<I")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {_CKPT_VERSION}")
    off += 32  # config hash; informational, meta carries the full config
    meta_len = unpack("<I")
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    count = unpack("<I")
    names = []
    for _ in range(count):
        n_len = unpack("<H")
        names.append(raw[off:off + n_len].decode("utf-8"))
        off += n_len
    arrays = {}
    for name in names:
        code, ndim = unpack("<BB")
        shape = tuple(unpack("<I") for _ in range(ndim))
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(raw[off:off + size], dtype=dtype).reshape(shape).copy()
        off += size
    return meta, arrays


def restore_model_arrays(model, arrays: dict) -> None:
    for name, param in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != param.value.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arrays[name].shape}, "
                                  f"expected {param.value.shape}")
        param.value = arrays[name].copy()


def apply_backtrack(state: TrainState, config: TrainConfig) -> None:
    """Restore weights and optimizer moments from the best checkpoint, then
    lower the learning rate by alpha.  Epoch counter and history continue."""
    if state.best_path is None:
        raise CheckpointError("no best checkpoint recorded yet")
    meta, arrays = load_checkpoint(state.best_path)
    restore_model_arrays(state.model, arrays)
    for name, _ in state.model.named_parameters():
        state.adam.m[name] = arrays[f"adam.m.{name}"].copy()
        state.adam.v[name] = arrays[f"adam.v.{name}"].copy()
    state.adam.t = meta["adam_t"]
    state.lr = config.alpha * state.lr
    state.backtracks += 1


# ---------------------------------------------------------------------------
# objectives and evaluation
# ---------------------------------------------------------------------------


def batch_loss(model, tasks, objective: str, dtype):
    """Forward a group of tasks and return (scalar Node, per-task float losses)."""
    batch = tasks_to_batch(tasks, dtype=dtype)
    out = model.forward(batch)
    if objective == "direct":
        loss, reports = matched_cross_entropy(out.node, [t.labels for t in tasks], batch.lengths)
        return loss, [r.value for r in reports]
    if objective == "param":
        pooled = mean_pool_head(out)
        per_task = []
        values = []
        for b, task in enumerate(tasks):
            nll = mog_nll(decode_mog(ad.take(pooled, (b,))), task.points)
            per_task.append(nll)
            values.append(nll.item())
        total = per_task[0]
        for nll in per_task[1:]:
            total = ad.add(total, nll)
        return ad.mul(total, 1.0 / len(per_task)), values
    raise ValueError(f"unknown objective {objective!r}")


def _worker_count() -> int:
    value = os.environ.get("SWARMSET_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def evaluate(model, tasks, objective: str, batch_size: int, dtype=np.float32):
    """Per-task losses on a task list; deterministic task order, no gradients.

    With SWARMSET_THREADS > 1 batches fan out to a thread pool; results are
    still assembled in task order.
    """
    groups = [tasks[i:i + batch_size] for i in range(0, len(tasks), batch_size)]

    def run(group):
        with no_grad():
            _, values = batch_loss(model, group, objective, dtype)
        return values

    workers = _worker_count()
    if workers > 1 and len(groups) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]
    return [v for group_vals in results for v in group_vals]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x7261, epoch))))


def _format_metric(value: float) -> str:
    return "nan" if not np.isfinite(value) else format(value, ".10g")


def train(model, train_tasks, val_tasks, config: TrainConfig, out_dir,
          objective: str = "direct", model_spec: dict | None = None) -> TrainState:
    """Run the full optimization loop; writes metrics.csv and best.ckpt into
    out_dir and returns the final TrainState."""
    if config.max_epochs > 0 and (not train_tasks or not val_tasks):
        raise ValueError("training needs non-empty train and validation splits")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    best_path = os.path.join(out_dir, "best.ckpt")
    state = TrainState(model=model, adam=AdamState.for_model(model), lr=config.lr0)
    model_spec = model_spec or {}
    started = time.perf_counter()
    decay_epoch = None
    if config.lr_decay_at is not None:
        decay_epoch = max(1, int(np.ceil(config.lr_decay_at * config.max_epochs)))

    with open(metrics_path, "w") as metrics:
        metrics.write("epoch,train_loss,val_loss,lr,backtracked,wall_s\n")
        for epoch in range(1, config.max_epochs + 1):
            if config.time_budget_s is not None and time.perf_counter() - started > config.time_budget_s:
                break
            if decay_epoch is not None and epoch == decay_epoch:
                state.lr *= config.lr_decay_factor
            order = _epoch_rng(config.seed, epoch).permutation(len(train_tasks))
            batch_losses = []
            for start in range(0, len(order), config.batch_size):
                group = [train_tasks[i] for i in order[start:start + config.batch_size]]
                loss, _ = batch_loss(model, group, objective, config.dtype)
                value = loss.item()
                if not np.isfinite(value):
                    continue
                for _, p in model.named_parameters():
                    p.zero_grad()
                ad.backward(loss)
                grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.value))
                         for n, p in model.named_parameters()}
                if adam_step(state, grads):
                    batch_losses.append(value)
            train_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")

            val_losses = evaluate(model, val_tasks, objective, config.batch_size, config.dtype)
            val_loss = float(np.mean(val_losses)) if val_losses else float("nan")
            state.epoch = epoch
            state.val_history.append(val_loss)

            backtracked = 0
            if np.isfinite(val_loss):
                state.divergence_streak = 0
                if val_loss < state.best_loss:
                    state.best_loss = val_loss
                    state.best_epoch = epoch
                    state.best_path = best_path
                    save_checkpoint(best_path, model, state.adam, state.lr, epoch, config, model_spec)
                elif backtrack_check(state.val_history, epoch, config.warmup_epochs, config.beta) == "backtrack":
                    apply_backtrack(state, config)
                    backtracked = 1
            else:
                state.divergence_streak += 1
                if state.divergence_streak > MAX_CONSECUTIVE_DIVERGENCES:
                    raise TrainingDiverged(
                        f"{state.divergence_streak} consecutive divergent epochs at epoch {epoch}")
                if state.best_path is not None:
                    apply_backtrack(state, config)
                    backtracked = 1

            wall = time.perf_counter() - started
            metrics.write(f"{epoch},{_format_metric(train_loss)},{_format_metric(val_loss)},"
                          f"{_format_metric(state.lr)},{backtracked},{wall:.3f}\n")
            metrics.flush()
    return state


def rebuild_from_checkpoint(path, d_in: int | None = None, d_out: int | None = None):
    """Reconstruct the trained model (and its spec) from a checkpoint file."""
    meta, arrays = load_checkpoint(path)
    spec = meta.get("model_spec") or {}
    for key in ("family", "code", "d_in", "d_out"):
        if key not in spec:
            raise CheckpointError(f"checkpoint lacks model_spec[{key!r}]; cannot rebuild")
    dtype = np.float32 if meta["config"]["precision"] == 32 else np.float64
    model = model_zoo.build_model(spec["family"], spec["code"],
                                  d_in or spec["d_in"], d_out or spec["d_out"],
                                  np.random.default_rng(0), dtype=dtype,
                                  pooling=spec.get("pooling", "mean"))
    restore_model_arrays(model, arrays)
    return model, meta
