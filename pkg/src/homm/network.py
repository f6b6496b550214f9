"""A small tanh MLP with hand-written reverse-mode gradients.

The layer feeding the softmax output is the adapted layer: its activations
are the features that the discrepancy losses compare across domains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from homm import discrepancy as D
from homm.discrepancy import ClassCenters, KernelConfig, PseudoLabelAssignment

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"HOMMCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A loss or activation became NaN or infinite."""


@dataclass
class MlpNetwork:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 3 or min(self.layer_sizes) < 1:
            raise ValueError("layer_sizes needs input, adapted and output widths, all >= 1, "
                             f"got {self.layer_sizes}")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {k} parameters have shapes {W.shape}/{b.shape}, "
                                 f"expected {shape}/({shape[1]},)")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def adapted_width(self) -> int:
        return self.layer_sizes[-2]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameters in layer order: ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpNetwork":
        return MlpNetwork(self.layer_sizes, list(params[0::2]), list(params[1::2]))

    def copy(self) -> "MlpNetwork":
        return self.with_params([a.copy() for a in self.params()])


def init_network(layer_sizes: Sequence[int], seed: int = 0) -> MlpNetwork:
    """Weights uniform in ``±1/sqrt(fan_in)``, biases zero."""
    rng = np.random.default_rng(seed)
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpNetwork(sizes, weights, biases)


def zero_network(layer_sizes: Sequence[int]) -> MlpNetwork:
    sizes = tuple(int(s) for s in layer_sizes)
    return MlpNetwork(sizes, [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                      [np.zeros(b) for b in sizes[1:]])


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(net: MlpNetwork, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise ValueError(f"inputs must have shape (b, {net.n_inputs}), got {X.shape}")
    acts = [X]
    for k, (W, b) in enumerate(zip(net.weights[:-1], net.biases[:-1])):
        a = np.tanh(acts[-1] @ W + b)
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite activation in hidden layer {k}")
        acts.append(a)
    logits = acts[-1] @ net.weights[-1] + net.biases[-1]
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits in output layer")
    return acts, logits


def forward(net: MlpNetwork, inputs):
    """Return ``(adapted_features, class_probabilities)`` for a batch of inputs."""
    acts, logits = _forward(net, inputs)
    return acts[-1], np.exp(_log_softmax(logits))


def cross_entropy(probs, labels) -> float:
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (P.shape[0],):
        raise ValueError(f"expected {P.shape[0]} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= P.shape[1]):
        raise ValueError(f"labels must lie in [0, {P.shape[1]})")
    picked = np.maximum(P[np.arange(len(y)), y], PROB_FLOOR)
    return float(-np.log(picked).mean())


@dataclass
class Objective:
    """Which terms of the composite loss are active, and their weights.

    Class centers and the pseudo-label assignment are constants here; they
    are refreshed outside the gradient computation.
    """

    source_weight: float = 1.0
    variant: str = "full"
    lambda_d: float = 0.0
    p: int = 3
    n_groups: int = 1
    idx: np.ndarray | None = None
    kernel: KernelConfig = field(default_factory=KernelConfig)
    lambda_dc: float = 0.0
    centers: ClassCenters | None = None
    assignment: PseudoLabelAssignment | None = None
    entropy_weight: float = 0.0

    def discrepancy_kwargs(self):
        return dict(p=self.p, n_groups=self.n_groups, idx=self.idx, kernel=self.kernel)

    @property
    def clustering_active(self) -> bool:
        return (self.lambda_dc != 0 and self.centers is not None
                and self.assignment is not None)


@dataclass
class LossTerms:
    source: float
    discrepancy: float
    clustering: float
    entropy: float
    total: float


def _check_term(name, value):
    if not np.isfinite(value):
        raise NonFiniteError(f"loss term {name} is not finite ({value})")
    return value


def objective_value(net, source_inputs, source_labels, target_inputs,
                    objective: Objective) -> LossTerms:
    """Evaluate the composite loss through the plain value functions."""
    hs, ps = forward(net, source_inputs)
    ht, pt = forward(net, target_inputs)
    ls = cross_entropy(ps, source_labels)
    ld = 0.0
    if objective.lambda_d != 0:
        ld = D.domain_discrepancy(objective.variant, hs, ht, **objective.discrepancy_kwargs())
    ldc = 0.0
    if objective.clustering_active:
        ldc = D.clustering_loss(ht, objective.assignment, objective.centers)
    lent = D.entropy_loss(pt) if objective.entropy_weight != 0 else 0.0
    total = (objective.source_weight * ls + objective.lambda_d * ld
             + objective.lambda_dc * ldc + objective.entropy_weight * lent)
    return LossTerms(ls, ld, ldc, lent, total)


def _backprop(net, acts, d_logits, d_adapted):
    """Accumulate parameter gradients for one stream."""
    n_layers = len(net.weights)
    gW = [None] * n_layers
    gb = [None] * n_layers
    gW[-1] = acts[-1].T @ d_logits
    gb[-1] = d_logits.sum(axis=0)
    delta = d_logits @ net.weights[-1].T + d_adapted
    for k in range(n_layers - 2, -1, -1):
        dz = delta * (1.0 - acts[k + 1] ** 2)
        gW[k] = acts[k].T @ dz
        gb[k] = dz.sum(axis=0)
        if k:
            delta = dz @ net.weights[k].T
    return gW, gb


def backward(net: MlpNetwork, source_inputs, source_labels, target_inputs,
             objective: Objective):
    """Loss terms and exact gradients of the composite loss.

    Returns ``(terms, grads)`` with ``grads`` ordered like ``net.params()``.
    Both domains run through the same parameters; their contributions add.
    """
    acts_s, logits_s = _forward(net, source_inputs)
    acts_t, logits_t = _forward(net, target_inputs)
    hs, ht = acts_s[-1], acts_t[-1]
    logp_s = _log_softmax(logits_s)
    logp_t = _log_softmax(logits_t)
    ps, pt = np.exp(logp_s), np.exp(logp_t)

    y = np.asarray(source_labels, dtype=np.int64)
    bs, bt = hs.shape[0], ht.shape[0]
    ls = _check_term("L_s", cross_entropy(ps, y))
    d_logits_s = np.zeros_like(logits_s)
    if objective.source_weight != 0:
        d_logits_s = ps.copy()
        d_logits_s[np.arange(bs), y] -= 1.0
        d_logits_s *= objective.source_weight / bs

    d_hs = np.zeros_like(hs)
    d_ht = np.zeros_like(ht)
    ld = 0.0
    if objective.lambda_d != 0:
        ld, gs, gt = D.domain_discrepancy_grad(objective.variant, hs, ht,
                                               **objective.discrepancy_kwargs())
        _check_term("L_d", ld)
        d_hs += objective.lambda_d * gs
        d_ht += objective.lambda_d * gt

    ldc = 0.0
    if objective.clustering_active:
        ldc, gc = D.clustering_loss_grad(ht, objective.assignment, objective.centers)
        _check_term("L_dc", ldc)
        d_ht += objective.lambda_dc * gc

    lent = 0.0
    d_logits_t = np.zeros_like(logits_t)
    if objective.entropy_weight != 0:
        row_h = -(pt * logp_t).sum(axis=1)
        lent = _check_term("L_ent", float(row_h.mean()))
        d_logits_t = -pt * (logp_t + row_h[:, None]) * (objective.entropy_weight / bt)

    total = (objective.source_weight * ls + objective.lambda_d * ld
             + objective.lambda_dc * ldc + objective.entropy_weight * lent)
    _check_term("total", total)

    gW_s, gb_s = _backprop(net, acts_s, d_logits_s, d_hs)
    gW_t, gb_t = _backprop(net, acts_t, d_logits_t, d_ht)
    grads = []
    for k in range(len(net.weights)):
        grads += [gW_s[k] + gW_t[k], gb_s[k] + gb_t[k]]
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k} (layer {k // 2})")
    return LossTerms(ls, ld, ldc, lent, total), grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    """Adam moment estimates for every parameter array."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs) -> "OptimizerState":
        return cls(m=[np.zeros_like(a) for a in params],
                   v=[np.zeros_like(a) for a in params], **kwargs)


def adam_update(params, state: OptimizerState, grads):
    """One bias-corrected Adam step; returns new ``(params, state)``."""
    if len(grads) != len(params):
        raise ValueError(f"got {len(grads)} gradients for {len(params)} parameters")
    for k, (a, g) in enumerate(zip(params, grads)):
        if np.shape(g) != a.shape:
            raise ValueError(f"gradient {k} has shape {np.shape(g)}, parameter {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k}")
    m = state.m or [np.zeros_like(a) for a in params]
    v = state.v or [np.zeros_like(a) for a in params]
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = [], [], []
    for k, (a, g, mk, vk) in enumerate(zip(params, grads, m, v)):
        with np.errstate(over="ignore", invalid="ignore"):
            mk = state.beta1 * mk + (1.0 - state.beta1) * g
            vk = state.beta2 * vk + (1.0 - state.beta2) * (g * g)
            step = a - state.lr * (mk / bc1) / (np.sqrt(vk / bc2) + state.eps)
        # a finite gradient can still overflow the second moment
        if not (np.all(np.isfinite(vk)) and np.all(np.isfinite(step))):
            raise NonFiniteError(f"optimizer state overflowed for parameter {k}")
        new_params.append(step)
        new_m.append(mk)
        new_v.append(vk)
    return new_params, replace(state, step=t, m=new_m, v=new_v)


def optimizer_step(net: MlpNetwork, state: OptimizerState, grads):
    params, state = adam_update(net.params(), state, grads)
    return net.with_params(params), state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    rel_errors: list[np.ndarray]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max((float(e.max()) for e in self.rel_errors if e.size), default=0.0)

    @property
    def failing(self) -> list[tuple[int, tuple[int, ...]]]:
        """``(parameter, index)`` pairs whose error exceeds the tolerance."""
        out = []
        for k, e in enumerate(self.rel_errors):
            out += [(k, tuple(int(i) for i in ix)) for ix in np.argwhere(e > self.tolerance)]
        return out

    @property
    def passed(self) -> bool:
        return not self.failing


def finite_diff_check(params: Sequence[np.ndarray], loss_closure: Callable[[list], float],
                      analytic: Sequence[np.ndarray], step: float = 1e-5,
                      tolerance: float = 1e-4, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``loss_closure``.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is (near) zero from dividing
    rounding noise by zero.
    """
    work = [np.array(a, dtype=np.float64, copy=True) for a in params]
    errors = []
    for k, a in enumerate(work):
        numeric = np.zeros_like(a)
        for ix in np.ndindex(a.shape):
            orig = a[ix]
            a[ix] = orig + step
            up = loss_closure(work)
            a[ix] = orig - step
            down = loss_closure(work)
            a[ix] = orig
            numeric[ix] = (up - down) / (2.0 * step)
        g = np.asarray(analytic[k], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), floor)
        errors.append(np.abs(g - numeric) / denom)
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: MlpNetwork, path) -> None:
    """Binary dump: magic, version, layer sizes, then W/b per layer as little-endian f8."""
    sizes = net.layer_sizes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(sizes)))
        fh.write(np.asarray(sizes, dtype="<i8").tobytes())
        for a in net.params():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpNetwork:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    sizes = tuple(int(s) for s in np.frombuffer(data, "<i8", n, offset))
    offset += 8 * n
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            params.append(np.frombuffer(data, "<f8", count, offset).astype(np.float64)
                          .reshape(shape))
            offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after parameters")
    return MlpNetwork(sizes, params[0::2], params[1::2])
