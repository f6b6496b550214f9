"""Tensor powers of feature vectors and random index sampling.

Tensors are stored flat in row-major order: the entry at multi-index
``(i, j, ..., k)`` of ``u^{(x)p}`` lives at ``i*L**(p-1) + j*L**(p-2) + ... + k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Largest tensor (in scalars) the exact path will materialise.
MEMORY_CAP = 10**7

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class CapacityError(ValueError):
    """Raised when an exact tensor of size ``L**p`` would exceed the memory cap."""

    def __init__(self, L: int, p: int, cap: int):
        self.L, self.p, self.cap = L, p, cap
        super().__init__(
            f"tensor of order p={p} over L={L} coordinates needs {L}**{p} scalars, "
            f"above the memory cap of {cap}"
        )


def check_capacity(L: int, p: int, cap: int = MEMORY_CAP) -> None:
    if p < 0:
        raise ValueError(f"moment order must be non-negative, got p={p}")
    if L**p > cap:
        raise CapacityError(L, p, cap)


def as_batch(batch, name: str = "batch") -> np.ndarray:
    """Validate a feature batch: 2-D, non-empty, finite, float64."""
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array (rows = samples), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and one column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _row_powers(H: np.ndarray, p: int) -> np.ndarray:
    """Row-wise flat tensor powers, shape ``(b, L**p)``."""
    out = np.ones((H.shape[0], 1))
    for _ in range(p):
        out = (out[:, :, None] * H[:, None, :]).reshape(H.shape[0], -1)
    return out


def tensor_power(u, p: int, cap: int = MEMORY_CAP) -> np.ndarray:
    """Flat ``p``-fold outer power of the vector ``u``; ``p=0`` gives ``[1.0]``."""
    u = np.asarray(u, dtype=np.float64).ravel()
    check_capacity(u.size, p, cap)
    return _row_powers(u[None, :], p)[0]


def mean_tensor_power(batch, p: int, cap: int = MEMORY_CAP) -> np.ndarray:
    """Average of :func:`tensor_power` over the rows of ``batch``."""
    H = as_batch(batch)
    b, L = H.shape
    check_capacity(L, p, cap)
    if p == 0:
        return np.ones(1)
    # H^T @ rowpowers(H, p-1) is the summed order-p tensor; chunk rows so the
    # intermediate (rows x L**(p-1)) stays under the cap.
    inner = L ** (p - 1)
    rows = max(1, cap // max(inner, 1))
    total = np.zeros((L, inner))
    for start in range(0, b, rows):
        chunk = H[start:start + rows]
        total += chunk.T @ _row_powers(chunk, p - 1)
    return total.ravel() / b


@dataclass(frozen=True)
class GroupPartition:
    """Contiguous equal-width coordinate groups of an adapted layer."""

    n_groups: int
    width: int
    groups: tuple[range, ...]

    @property
    def covered(self) -> int:
        return self.groups[-1].stop


def partition_groups(L: int, n_groups: int, widen_last: bool = False) -> GroupPartition:
    """Split ``L`` coordinates into ``n_groups`` ranges of width ``L // n_groups``.

    The trailing ``L % n_groups`` coordinates are left out unless
    ``widen_last`` is set, in which case they join the final group.
    """
    if not 1 <= n_groups <= L:
        raise ValueError(f"need 1 <= n_groups <= L, got n_groups={n_groups}, L={L}")
    width = L // n_groups
    groups = [range(k * width, (k + 1) * width) for k in range(n_groups)]
    if widen_last:
        groups[-1] = range(groups[-1].start, L)
    return GroupPartition(n_groups, width, tuple(groups))


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of the SplitMix64 generator seeded with ``seed``.

    Pure integer arithmetic on uint64, so the stream is identical on every
    platform and numpy version.
    """
    state = np.uint64(seed % 2**64)
    steps = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(state + steps * _GOLDEN)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically combine a run seed with integer keys (e.g. a step index)."""
    out = seed % 2**64
    for key in keys:
        out = int(splitmix64(out ^ (key % 2**64), 1)[0])
    return out


def sample_indices(L: int, p: int, N: int, seed: int) -> np.ndarray:
    """``N x p`` matrix of i.i.d. uniform coordinates in ``[0, L)``.

    Repeated coordinates within a row are allowed.
    """
    if L < 1 or p < 1 or N < 1:
        raise ValueError(f"need L, p, N >= 1, got L={L}, p={p}, N={N}")
    if L >= 2**32:
        raise ValueError("L must be below 2**32")
    raw = splitmix64(seed, N * p)
    # multiply-shift on the top 32 bits; bias is at most L / 2**32
    idx = ((raw >> np.uint64(32)) * np.uint64(L)) >> np.uint64(32)
    return idx.astype(np.int64).reshape(N, p)


def exhaustive_indices(L: int, p: int, cap: int = MEMORY_CAP) -> np.ndarray:
    """All ``L**p`` coordinates in row-major order, as an ``L**p x p`` matrix."""
    check_capacity(L, p, cap)
    if p == 0:
        raise ValueError("exhaustive index matrix needs p >= 1")
    grids = np.indices((L,) * p).reshape(p, -1)
    return grids.T.astype(np.int64)


def _check_indices(idx, L: int) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] < 1 or idx.shape[1] < 1:
        raise ValueError(f"index matrix must be N x p with N, p >= 1, got shape {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("index matrix must hold integers")
    if idx.min() < 0 or idx.max() >= L:
        raise ValueError(f"index matrix entries must lie in [0, {L}), found range "
                         f"[{idx.min()}, {idx.max()}]")
    return idx


def sampled_products(batch, idx) -> np.ndarray:
    """Entry ``[i, k]`` is ``prod_j batch[i, idx[k, j]]``; shape ``(b, N)``."""
    H = as_batch(batch)
    idx = _check_indices(idx, H.shape[1])
    out = H[:, idx[:, 0]].copy()
    for j in range(1, idx.shape[1]):
        out *= H[:, idx[:, j]]
    return out


def sampled_products_backward(H: np.ndarray, idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pull a gradient on :func:`sampled_products` back onto the batch."""
    b, L = H.shape
    N, p = idx.shape
    factors = [H[:, idx[:, j]] for j in range(p)]
    # leave-one-out products via prefix/suffix sweeps, safe at zeros
    prefix = [np.ones((b, N))]
    for f in factors[:-1]:
        prefix.append(prefix[-1] * f)
    suffix = np.ones((b, N))
    grad = np.zeros((b, L))
    for j in range(p - 1, -1, -1):
        contrib = grad_out * prefix[j] * suffix
        onehot = np.zeros((N, L))
        onehot[np.arange(N), idx[:, j]] = 1.0
        grad += contrib @ onehot
        suffix = suffix * factors[j]
    return grad
