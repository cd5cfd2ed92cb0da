"""Synthetic clustering benchmarks: generators for the direct task (mixture of
full-covariance Gaussians, variable cluster count) and the parametrized task
(four isotropic Gaussians with Dirichlet weights), plus a checksummed binary
dataset container.

Randomness is counter-based: task i of a dataset draws from
Philox(SeedSequence(seed, spawn_key=(i,))), so generation is a pure function
of (seed, index) and embarrassingly parallel.  The scheme is recorded in the
manifest as `generator_version`.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from swarmset.autodiff import PopulationBatch

GENERATOR_VERSION = "philox-spawnkey-1"
_MAGIC = b"SWARMSET-DS\x00"
_FORMAT_VERSION = 1


class DatasetError(Exception):
    """Base class for dataset container failures."""


class DatasetVersionError(DatasetError):
    """Wrong magic bytes or unsupported container version."""


class DatasetTruncatedError(DatasetError):
    """File ends before the declared records do."""


class DatasetChecksumError(DatasetError):
    """A record's payload does not match its CRC32."""


@dataclass
class ClusterTask:
    """One synthetic task: 2-d points, their generating mixture, and labels."""

    points: np.ndarray       # [2, N] float32
    labels: np.ndarray       # [N] int64, values < n_clust
    n_clust: int
    centers: np.ndarray      # [2, K] float32
    covariances: np.ndarray  # [K, 2, 2] float32
    weights: np.ndarray      # [K] float32, non-negative, sums to 1

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def validate(self):
        n, k = self.n_points, self.n_clust
        if self.labels.shape != (n,) or self.labels.min() < 0 or self.labels.max() >= k:
            raise ValueError(f"labels must be {n} values in [0, {k})")
        if self.centers.shape != (2, k) or self.covariances.shape != (k, 2, 2) or self.weights.shape != (k,):
            raise ValueError("mixture parameter shapes inconsistent with n_clust")
        for cov in self.covariances:
            if not np.allclose(cov, cov.T, atol=1e-6):
                raise ValueError("covariance not symmetric")
            if np.linalg.det(cov.astype(np.float64)) <= 0 or np.trace(cov) <= 0:
                raise ValueError("covariance not positive-definite")
        if self.weights.min() < 0 or abs(float(self.weights.sum()) - 1.0) > 1e-5:
            raise ValueError("weights must be a distribution")
        return self


@dataclass
class DatasetManifest:
    seed: int
    task_count: int
    train_count: int
    val_count: int
    generator_version: str = GENERATOR_VERSION

    def __post_init__(self):
        if self.train_count + self.val_count != self.task_count:
            raise ValueError(f"{self.train_count} + {self.val_count} != {self.task_count}")

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "task_count": self.task_count,
            "train_count": self.train_count,
            "val_count": self.val_count,
            "generator_version": self.generator_version,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "DatasetManifest":
        d = json.loads(blob)
        return cls(seed=d["seed"], task_count=d["task_count"], train_count=d["train_count"],
                   val_count=d["val_count"], generator_version=d["generator_version"])


def task_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based per-task substream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def sample_inv_wishart(rng: np.random.Generator, df: int, scale: np.ndarray):
    """Draw from the inverse-Wishart via the Bartlett decomposition of a
    Wishart with the inverted scale.  Numerically non-positive-definite draws
    are rejected and resampled; the rejection count is returned."""
    p = scale.shape[0]
    chol_inv_scale = np.linalg.cholesky(np.linalg.inv(scale))
    rejects = 0
    while True:
        bartlett = np.zeros((p, p))
        for i in range(p):
            bartlett[i, i] = np.sqrt(rng.chisquare(df - i))
            for j in range(i):
                bartlett[i, j] = rng.standard_normal()
        factor = chol_inv_scale @ bartlett
        wishart = factor @ factor.T
        try:
            cov = np.linalg.inv(wishart)
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            rejects += 1
            continue
        return cov, rejects


def _sample_points(rng, centers, covariances, labels):
    chols = np.linalg.cholesky(covariances.astype(np.float64))
    z = rng.standard_normal((labels.size, 2))
    pts = centers[:, labels].T + np.einsum("nij,nj->ni", chols[labels], z)
    return np.ascontiguousarray(pts.T, dtype=np.float32)


def gen_direct_task(rng: np.random.Generator) -> ClusterTask:
    """Variable-size mixture task: 100..1000 points, 3..10 clusters, standard
    normal centers, inverse-Wishart(df=4, 0.05*I) covariances, uniform labels."""
    n = int(rng.integers(100, 1001))
    k = int(rng.integers(3, 11))
    centers = rng.standard_normal((2, k))
    covariances = np.empty((k, 2, 2))
    for j in range(k):
        covariances[j], _ = sample_inv_wishart(rng, df=4, scale=0.05 * np.eye(2))
    labels = rng.integers(0, k, size=n)
    points = _sample_points(rng, centers, covariances, labels)
    return ClusterTask(
        points=points,
        labels=labels.astype(np.int64),
        n_clust=k,
        centers=centers.astype(np.float32),
        covariances=covariances.astype(np.float32),
        weights=(np.ones(k) / k).astype(np.float32),
    ).validate()


def gen_param_task(rng: np.random.Generator) -> ClusterTask:
    """Fixed 4-cluster isotropic task: sigma 0.3, means uniform in (-4, 4),
    100..500 points, flat-Dirichlet cluster weights."""
    k = 4
    n = int(rng.integers(100, 501))
    centers = rng.uniform(-4.0, 4.0, size=(2, k))
    weights = rng.dirichlet(np.ones(k))
    covariances = np.tile((0.3 ** 2) * np.eye(2), (k, 1, 1))
    labels = rng.choice(k, size=n, p=weights)
    points = _sample_points(rng, centers, covariances, labels)
    return ClusterTask(
        points=points,
        labels=labels.astype(np.int64),
        n_clust=k,
        centers=centers.astype(np.float32),
        covariances=covariances.astype(np.float32),
        weights=weights.astype(np.float32),
    ).validate()


_GENERATORS = {"direct": gen_direct_task, "param": gen_param_task}


def build_dataset(kind: str, count: int, seed: int, val_count: int | None = None):
    """Generate `count` tasks deterministically and split train/val."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown task kind {kind!r}")
    if val_count is None:
        val_count = count // 10
    if not 0 <= val_count <= count:
        raise ValueError(f"val_count {val_count} out of range for {count} tasks")
    gen = _GENERATORS[kind]
    tasks = [gen(task_rng(seed, i)) for i in range(count)]
    manifest = DatasetManifest(seed=seed, task_count=count,
                               train_count=count - val_count, val_count=val_count)
    return tasks, manifest


def shuffle_entities(task: ClusterTask, rng: np.random.Generator) -> ClusterTask:
    """Same task under a uniform random permutation of its entities."""
    perm = rng.permutation(task.n_points)
    return ClusterTask(
        points=np.ascontiguousarray(task.points[:, perm]),
        labels=task.labels[perm],
        n_clust=task.n_clust,
        centers=task.centers,
        covariances=task.covariances,
        weights=task.weights,
    )


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------


def _record_bytes(task: ClusterTask) -> bytes:
    n, k = task.n_points, task.n_clust
    parts = [
        struct.pack("<II", n, k),
        task.points.astype("<f4").tobytes(order="F"),
        task.labels.astype("<u2").tobytes(),
        task.centers.astype("<f4").tobytes(order="F"),
        task.covariances.astype("<f4").tobytes(),
        task.weights.astype("<f4").tobytes(),
    ]
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def write_dataset(path, tasks, manifest: DatasetManifest) -> None:
    if manifest.task_count != len(tasks):
        raise ValueError(f"manifest says {manifest.task_count} tasks, got {len(tasks)}")
    blob = manifest.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for task in tasks:
            fh.write(_record_bytes(task))


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise DatasetTruncatedError(f"file ends inside {what} ({len(data)}/{size} bytes)")
    return data


def read_dataset(path):
    """Read back (tasks, manifest); integrity failures raise distinct errors."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(_MAGIC), "magic")
        if magic != _MAGIC:
            raise DatasetVersionError("not a dataset container (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _FORMAT_VERSION:
            raise DatasetVersionError(f"container version {version}, expected {_FORMAT_VERSION}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "manifest length"))
        manifest = DatasetManifest.from_json(_read_exact(fh, blob_len, "manifest").decode("utf-8"))
        tasks = []
        for t in range(manifest.task_count):
            head = _read_exact(fh, 8, f"record {t} header")
            n, k = struct.unpack("<II", head)
            body_size = 4 * (2 * n) + 2 * n + 4 * (2 * k) + 4 * (4 * k) + 4 * k
            body = _read_exact(fh, body_size, f"record {t} body")
            (crc,) = struct.unpack("<I", _read_exact(fh, 4, f"record {t} checksum"))
            if zlib.crc32(head + body) != crc:
                raise DatasetChecksumError(f"record {t} failed its CRC32 check")
            off = 0

            def chunk(count, dt):
                nonlocal off
                width = np.dtype(dt).itemsize * count
                arr = np.frombuffer(body[off:off + width], dtype=dt)
                off += width
                return arr

            points = chunk(2 * n, "<f4").reshape(n, 2).T
            labels = chunk(n, "<u2").astype(np.int64)
            centers = chunk(2 * k, "<f4").reshape(k, 2).T
            covariances = chunk(4 * k, "<f4").reshape(k, 2, 2)
            weights = chunk(k, "<f4")
            tasks.append(ClusterTask(
                points=np.ascontiguousarray(points, dtype=np.float32),
                labels=labels,
                n_clust=k,
                centers=np.ascontiguousarray(centers, dtype=np.float32),
                covariances=np.ascontiguousarray(covariances, dtype=np.float32),
                weights=np.ascontiguousarray(weights, dtype=np.float32),
            ))
        extra = fh.read(1)
        if extra:
            raise DatasetTruncatedError("trailing bytes after the last record")
    return tasks, manifest


def tasks_to_batch(tasks, dtype=np.float32) -> PopulationBatch:
    """Pad a list of tasks to the largest N among them."""
    n_max = max(t.n_points for t in tasks)
    values = np.zeros((len(tasks), 2, n_max), dtype=dtype)
    lengths = np.empty(len(tasks), dtype=np.int64)
    for b, t in enumerate(tasks):
        values[b, :, : t.n_points] = t.points
        lengths[b] = t.n_points
    return PopulationBatch(values, lengths)
