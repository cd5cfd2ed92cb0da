"""Shared test oracles.

The finite-difference gradient here is the independent reference for every
backward rule in the package: it only ever calls forward passes, so it cannot
share a bug with the reverse-mode path it checks.
"""

import numpy as np

from swarmset.autodiff import Node, no_grad


def fd_gradient(fn, arrays, index, step=1e-5):
    """Central finite-difference gradient of scalar fn w.r.t. arrays[index].

    fn maps a list of float64 numpy arrays to a python float and is evaluated
    with forward passes only.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fplus = fn(base)
        flat[j] = orig - step
        fminus = fn(base)
        flat[j] = orig
        gflat[j] = (fplus - fminus) / (2.0 * step)
    return grad


def check_grads(make_loss, arrays, rtol=1e-4, step=1e-5, floor=1e-6):
    """Compare reverse-mode grads of make_loss against finite differences.

    make_loss takes a list of Nodes and returns a scalar Node.  Relative error
    uses a small absolute floor so near-zero gradient entries do not blow up
    the ratio.
    """
    params = [Node(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = make_loss(params)
    loss.backward()

    def forward_only(vals):
        with no_grad():
            return float(make_loss([Node(v) for v in vals]).value)

    for i, p in enumerate(params):
        fd = fd_gradient(forward_only, arrays, i, step=step)
        got = p.grad if p.grad is not None else np.zeros_like(fd)
        denom = np.maximum(np.abs(fd), floor)
        rel = np.abs(got - fd) / denom
        assert rel.max() <= rtol, (
            f"grad mismatch on array {i}: max rel err {rel.max():.3e} "
            f"(analytic {got.reshape(-1)[np.argmax(rel)]:.6e} vs fd {fd.reshape(-1)[np.argmax(rel)]:.6e})"
        )


def permute_entities(batch, perm):
    """Permute the valid entities of a single-task batch (B must be 1)."""
    from swarmset.autodiff import PopulationBatch

    assert batch.batch_size == 1
    values = batch.array.copy()
    n = int(batch.lengths[0])
    values[0, :, :n] = values[0, :, :n][:, perm]
    return PopulationBatch(values, batch.lengths)


def equivariance_gap(forward, batch, perm):
    """max |pi(f(x)) - f(pi(x))| over valid positions, for one permutation."""
    with np.errstate(all="ignore"):
        y = forward(batch).array
        y_perm = forward(permute_entities(batch, perm)).array
    n = int(batch.lengths[0])
    lhs = y[0, :, :n][:, perm]
    rhs = y_perm[0, :, :n]
    return float(np.max(np.abs(lhs - rhs)))


def loop_masked_mean(values, lengths):
    """Naive per-task mean over valid entities."""
    B, D, _ = values.shape
    out = np.zeros((B, D), dtype=np.float64)
    for b in range(B):
        for d in range(D):
            out[b, d] = sum(float(values[b, d, i]) for i in range(lengths[b])) / lengths[b]
    return out


def loop_masked_max(values, lengths):
    B, D, _ = values.shape
    out = np.zeros((B, D), dtype=np.float64)
    for b in range(B):
        for d in range(D):
            out[b, d] = max(float(values[b, d, i]) for i in range(lengths[b]))
    return out


def loop_causal_mean(values, lengths):
    """O(N^2) strict-prefix mean; position 0 and padding stay zero."""
    B, D, N = values.shape
    out = np.zeros((B, D, N), dtype=np.float64)
    for b in range(B):
        for d in range(D):
            for i in range(1, lengths[b]):
                out[b, d, i] = sum(float(values[b, d, j]) for j in range(i)) / i
    return out
