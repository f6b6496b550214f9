"""Domain discrepancies between adapted-layer feature batches.

Every loss comes as a value function (``homm_full``, ``gram_loss``, ...) and,
where it feeds training, a ``*_grad`` companion returning
``(value, d_source, d_target)``. The value functions go through the tensor
machinery in :mod:`homm.moments`; the gradient functions use contracted
closed forms, so the two routes check each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from homm.moments import (
    MEMORY_CAP,
    _check_indices,
    _row_powers,
    as_batch,
    check_capacity,
    mean_tensor_power,
    partition_groups,
    sampled_products,
    sampled_products_backward,
)

VARIANTS = ("full", "group", "sampled", "kernelized", "mmd", "gram", "coral")


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel ``exp(-gamma * ||x - y||**exponent)``.

    ``exponent=2`` is the Gaussian kernel; ``exponent=1`` uses the plain
    Euclidean distance.
    """

    gamma: float = 1e-4
    exponent: int = 2

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"kernel gamma must be positive, got {self.gamma}")
        if self.exponent not in (1, 2):
            raise ValueError(f"kernel exponent must be 1 or 2, got {self.exponent}")


@dataclass(frozen=True)
class PseudoLabelAssignment:
    """Confident target rows with their predicted class and confidence."""

    sample_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    confidences: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.sample_indices)


@dataclass(frozen=True)
class ClassCenters:
    """Per-class target feature centroids and their moving-average weight."""

    centers: np.ndarray
    alpha: float = 0.5

    @classmethod
    def zeros(cls, n_classes: int, width: int, alpha: float = 0.5) -> "ClassCenters":
        return cls(np.zeros((n_classes, width)), alpha)


def _pair(source, target, same_size: bool = False):
    Hs = as_batch(source, "source")
    Ht = as_batch(target, "target")
    if Hs.shape[1] != Ht.shape[1]:
        raise ValueError(f"feature width mismatch: source has {Hs.shape[1]} columns, "
                         f"target has {Ht.shape[1]}")
    if same_size and Hs.shape[0] != Ht.shape[0]:
        raise ValueError(f"batch size mismatch: source has {Hs.shape[0]} rows, "
                         f"target has {Ht.shape[0]}; this loss needs equal batch sizes")
    return Hs, Ht


# ---------------------------------------------------------------------------
# exact moment matching


def homm_full(source, target, p: int, cap: int = MEMORY_CAP) -> float:
    """Squared distance between order-``p`` mean moment tensors, divided by ``L**p``."""
    Hs, Ht = _pair(source, target)
    L = Hs.shape[1]
    check_capacity(L, p, cap)
    if p == 0:
        return 0.0
    diff = mean_tensor_power(Hs, p, cap) - mean_tensor_power(Ht, p, cap)
    return float(diff @ diff) / L**p


def _moment_grad(Hs, Ht, p):
    """Value and gradients of ``||mean_s - mean_t||**2`` over order-``p`` tensors."""
    L = Hs.shape[1]
    bs, bt = Hs.shape[0], Ht.shape[0]
    Ps = _row_powers(Hs, p - 1)
    Pt = _row_powers(Ht, p - 1)
    D = Hs.T @ Ps / bs - Ht.T @ Pt / bt  # L x L**(p-1)
    # D is symmetric in all of its indices, so every slot contributes equally
    gs = (2.0 * p / bs) * (Ps @ D.T)
    gt = -(2.0 * p / bt) * (Pt @ D.T)
    return float(np.sum(D * D)), gs, gt


def homm_full_grad(source, target, p: int, cap: int = MEMORY_CAP):
    Hs, Ht = _pair(source, target)
    L = Hs.shape[1]
    check_capacity(L, p, cap)
    if p == 0:
        return 0.0, np.zeros_like(Hs), np.zeros_like(Ht)
    value, gs, gt = _moment_grad(Hs, Ht, p)
    scale = 1.0 / L**p
    return value * scale, gs * scale, gt * scale


def linear_mmd(source, target) -> float:
    """Squared distance between feature means, divided by ``L``."""
    Hs, Ht = _pair(source, target)
    diff = Hs.mean(axis=0) - Ht.mean(axis=0)
    return float(diff @ diff) / Hs.shape[1]


def linear_mmd_grad(source, target):
    Hs, Ht = _pair(source, target)
    L = Hs.shape[1]
    diff = Hs.mean(axis=0) - Ht.mean(axis=0)
    gs = np.broadcast_to(2.0 * diff / (L * Hs.shape[0]), Hs.shape).copy()
    gt = np.broadcast_to(-2.0 * diff / (L * Ht.shape[0]), Ht.shape).copy()
    return float(diff @ diff) / L, gs, gt


def gram_loss(source, target, centralize: bool = False) -> float:
    """Gram-matrix matching ``||HsᵀHs - HtᵀHt||²_F / (b² L²)``.

    With ``centralize`` the column means are removed first, which turns the
    Gram matrices into (unnormalised) covariances.
    """
    Hs, Ht = _pair(source, target, same_size=True)
    if centralize:
        Hs = Hs - Hs.mean(axis=0)
        Ht = Ht - Ht.mean(axis=0)
    b, L = Hs.shape
    diff = Hs.T @ Hs - Ht.T @ Ht
    return float(np.sum(diff * diff)) / (b**2 * L**2)


def gram_loss_grad(source, target, centralize: bool = False):
    Hs, Ht = _pair(source, target, same_size=True)
    if centralize:
        Hs = Hs - Hs.mean(axis=0)
        Ht = Ht - Ht.mean(axis=0)
    b, L = Hs.shape
    diff = Hs.T @ Hs - Ht.T @ Ht
    scale = 1.0 / (b**2 * L**2)
    gs = 4.0 * scale * (Hs @ diff)
    gt = -4.0 * scale * (Ht @ diff)
    if centralize:
        gs -= gs.mean(axis=0)
        gt -= gt.mean(axis=0)
    return float(np.sum(diff * diff)) * scale, gs, gt


def coral_loss(source, target) -> float:
    return gram_loss(source, target, centralize=True)


def homm_group(source, target, p: int, n_groups: int, cap: int = MEMORY_CAP,
               widen_last: bool = False) -> float:
    """Moment matching computed separately on contiguous coordinate groups."""
    Hs, Ht = _pair(source, target, same_size=True)
    part = partition_groups(Hs.shape[1], n_groups, widen_last)
    widths = [len(g) for g in part.groups]
    check_capacity(max(widths), p, cap)
    if p == 0:
        return 0.0
    total = 0.0
    for g in part.groups:
        sl = slice(g.start, g.stop)
        diff = mean_tensor_power(Hs[:, sl], p, cap) - mean_tensor_power(Ht[:, sl], p, cap)
        total += float(diff @ diff)
    # with equal batch sizes, sums over b rows scaled by 1/b**2 equal mean differences
    return total / part.width**p


def homm_group_grad(source, target, p: int, n_groups: int, cap: int = MEMORY_CAP,
                    widen_last: bool = False):
    Hs, Ht = _pair(source, target, same_size=True)
    part = partition_groups(Hs.shape[1], n_groups, widen_last)
    check_capacity(max(len(g) for g in part.groups), p, cap)
    gs, gt = np.zeros_like(Hs), np.zeros_like(Ht)
    if p == 0:
        return 0.0, gs, gt
    total = 0.0
    for g in part.groups:
        sl = slice(g.start, g.stop)
        value, gsk, gtk = _moment_grad(Hs[:, sl], Ht[:, sl], p)
        total += value
        gs[:, sl] = gsk
        gt[:, sl] = gtk
    scale = 1.0 / part.width**p
    return total * scale, gs * scale, gt * scale


# ---------------------------------------------------------------------------
# sampled and kernelised matching


def homm_sampled(source, target, idx) -> float:
    """Moment matching restricted to the tensor coordinates listed in ``idx``."""
    Hs, Ht = _pair(source, target, same_size=True)
    idx = _check_indices(idx, Hs.shape[1])
    b, N = Hs.shape[0], idx.shape[0]
    d = sampled_products(Hs, idx).sum(axis=0) - sampled_products(Ht, idx).sum(axis=0)
    return float(d @ d) / (b**2 * N)


def homm_sampled_grad(source, target, idx):
    Hs, Ht = _pair(source, target, same_size=True)
    idx = _check_indices(idx, Hs.shape[1])
    b, N = Hs.shape[0], idx.shape[0]
    d = sampled_products(Hs, idx).sum(axis=0) - sampled_products(Ht, idx).sum(axis=0)
    g_out = np.broadcast_to(2.0 * d / (b**2 * N), (b, N))
    gs = sampled_products_backward(Hs, idx, g_out)
    gt = sampled_products_backward(Ht, idx, -g_out)
    return float(d @ d) / (b**2 * N), gs, gt


def kernel_matrix(X, Y, kernel: KernelConfig) -> np.ndarray:
    sq = cdist(X, Y, "sqeuclidean")
    if kernel.exponent == 2:
        return np.exp(-kernel.gamma * sq)
    return np.exp(-kernel.gamma * np.sqrt(sq))


def _kernel_mmd(S, T, kernel):
    bs, bt = S.shape[0], T.shape[0]
    value = (kernel_matrix(S, S, kernel).sum() / bs**2
             - 2.0 * kernel_matrix(S, T, kernel).sum() / (bs * bt)
             + kernel_matrix(T, T, kernel).sum() / bt**2)
    return max(float(value), 0.0)


def kernel_mmd(source, target, kernel: KernelConfig | None = None) -> float:
    """Biased kernel MMD estimate between two samples."""
    Hs, Ht = _pair(source, target)
    return _kernel_mmd(Hs, Ht, kernel or KernelConfig())


def khomm(source, target, idx, kernel: KernelConfig | None = None) -> float:
    """Kernel MMD between the sampled moment vectors of the two batches."""
    Hs, Ht = _pair(source, target, same_size=True)
    idx = _check_indices(idx, Hs.shape[1])
    return _kernel_mmd(sampled_products(Hs, idx), sampled_products(Ht, idx),
                       kernel or KernelConfig())


def _kernel_mmd_grad(S, T, kernel):
    bs = S.shape[0]
    Z = np.vstack([S, T])
    w = np.concatenate([np.full(bs, 1.0 / bs), np.full(T.shape[0], -1.0 / T.shape[0])])
    sq = cdist(Z, Z, "sqeuclidean")
    if kernel.exponent == 2:
        K = np.exp(-kernel.gamma * sq)
        slope = 2.0 * K
    else:
        dist = np.sqrt(sq)
        K = np.exp(-kernel.gamma * dist)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(dist > 0, K / dist, 0.0)
    W = np.outer(w, w)
    value = float(np.sum(W * K))
    if value <= 0.0:
        return 0.0, np.zeros_like(S), np.zeros_like(T)
    A = W * slope
    gZ = -2.0 * kernel.gamma * (A.sum(axis=1)[:, None] * Z - A @ Z)
    return value, gZ[:bs], gZ[bs:]


def khomm_grad(source, target, idx, kernel: KernelConfig | None = None):
    Hs, Ht = _pair(source, target, same_size=True)
    idx = _check_indices(idx, Hs.shape[1])
    value, gS, gT = _kernel_mmd_grad(sampled_products(Hs, idx), sampled_products(Ht, idx),
                                     kernel or KernelConfig())
    return value, sampled_products_backward(Hs, idx, gS), sampled_products_backward(Ht, idx, gT)


# ---------------------------------------------------------------------------
# dispatch on the loss variant used by training


def domain_discrepancy(variant: str, source, target, *, p: int = 3, n_groups: int = 1,
                       idx=None, kernel: KernelConfig | None = None) -> float:
    if variant == "full":
        return homm_full(source, target, p)
    if variant == "group":
        return homm_group(source, target, p, n_groups)
    if variant == "sampled":
        return homm_sampled(source, target, idx)
    if variant == "kernelized":
        return khomm(source, target, idx, kernel)
    if variant == "mmd":
        return linear_mmd(source, target)
    if variant == "gram":
        return gram_loss(source, target)
    if variant == "coral":
        return gram_loss(source, target, centralize=True)
    raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")


def domain_discrepancy_grad(variant: str, source, target, *, p: int = 3, n_groups: int = 1,
                            idx=None, kernel: KernelConfig | None = None):
    if variant == "full":
        return homm_full_grad(source, target, p)
    if variant == "group":
        return homm_group_grad(source, target, p, n_groups)
    if variant == "sampled":
        return homm_sampled_grad(source, target, idx)
    if variant == "kernelized":
        return khomm_grad(source, target, idx, kernel)
    if variant == "mmd":
        return linear_mmd_grad(source, target)
    if variant == "gram":
        return gram_loss_grad(source, target)
    if variant == "coral":
        return gram_loss_grad(source, target, centralize=True)
    raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# target-side clustering terms


def entropy_loss(probs) -> float:
    """Mean Shannon entropy (nats) of the rows of a probability matrix."""
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError(f"probs must be 2-D, got shape {P.shape}")
    if np.any(P < 0) or np.any(P > 1):
        raise ValueError("probs entries must lie in [0, 1]")
    sums = P.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
    if bad.size:
        raise ValueError(f"probs row {bad[0]} sums to {sums[bad[0]]}, not 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, -P * np.log(P), 0.0)
    return float(terms.sum() / P.shape[0])


def _check_assignment(feats, assignment, centers):
    n_classes = centers.shape[0]
    idx = np.asarray(assignment.sample_indices, dtype=np.int64)
    labels = np.asarray(assignment.labels, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= feats.shape[0]):
        raise ValueError("assignment refers to rows outside the batch")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"pseudo-label out of range for {n_classes} class centers")
    if centers.shape[1] != feats.shape[1]:
        raise ValueError(f"centers have width {centers.shape[1]}, features {feats.shape[1]}")
    return idx, labels


def clustering_loss(target_feats, assignment: PseudoLabelAssignment,
                    centers: ClassCenters) -> float:
    """Mean squared distance of pseudo-labelled rows to their class center."""
    H = as_batch(target_feats, "target_feats")
    idx, labels = _check_assignment(H, assignment, centers.centers)
    if idx.size == 0:
        return 0.0
    diff = H[idx] - centers.centers[labels]
    return float(np.sum(diff * diff)) / idx.size


def clustering_loss_grad(target_feats, assignment, centers):
    H = as_batch(target_feats, "target_feats")
    idx, labels = _check_assignment(H, assignment, centers.centers)
    grad = np.zeros_like(H)
    if idx.size == 0:
        return 0.0, grad
    diff = H[idx] - centers.centers[labels]
    np.add.at(grad, idx, 2.0 * diff / idx.size)
    return float(np.sum(diff * diff)) / idx.size, grad


def update_centers(centers: ClassCenters, target_feats, assignment: PseudoLabelAssignment,
                   skip_absent: bool = True) -> ClassCenters:
    """Moving-average center update from one batch of pseudo-labelled features.

    Classes without assigned rows keep their center unless ``skip_absent`` is
    false, in which case they decay toward the origin like every other class.
    """
    H = as_batch(target_feats, "target_feats")
    idx, labels = _check_assignment(H, assignment, centers.centers)
    C = centers.centers
    sums = np.zeros_like(C)
    np.add.at(sums, labels, H[idx])
    counts = np.bincount(labels, minlength=C.shape[0]).astype(np.float64)
    delta = sums / (1.0 + counts)[:, None]
    alpha = centers.alpha
    new = alpha * C + (1.0 - alpha) * delta
    if skip_absent:
        new = np.where((counts > 0)[:, None], new, C)
    return ClassCenters(new, alpha)
