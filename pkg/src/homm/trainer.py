"""Training loop for source classification plus domain alignment."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from homm import discrepancy as D
from homm.data import LabeledDataset
from homm.discrepancy import ClassCenters, KernelConfig, PseudoLabelAssignment
from homm.moments import derive_seed, sample_indices
from homm.network import (
    MlpNetwork,
    NonFiniteError,
    Objective,
    OptimizerState,
    backward,
    forward,
    init_network,
    optimizer_step,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """An invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class TrainingAborted(RuntimeError):
    pass


def default_lambda_d(p: int) -> float:
    # digit-scale values; higher orders have much smaller moments
    return 1e7 if p >= 4 else 1e4


@dataclass
class TrainConfig:
    lambda_d: float | None = None
    lambda_dc: float = 0.0
    eta: float = 0.8
    warmup_steps: int = 0
    loss_variant: str = "full"
    p: int = 3
    n_groups: int = 1
    N: int = 1000
    gamma: float = 1e-4
    kernel_exponent: int = 2
    entropy_weight: float = 0.0
    batch_size: int = 64
    total_steps: int = 1000
    alpha: float = 0.5
    seed: int = 0
    learning_rate: float = 1e-3
    hidden_sizes: tuple[int, ...] = (32, 32)
    adapted_width: int = 64
    n_classes: int | None = None
    log_every: int = 1
    eval_every: int = 100
    strict_centers: bool = False

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.validate()

    def validate(self) -> None:
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(self.lambda_d is None or self.lambda_d >= 0, "lambda_d", "must be >= 0")
        need(self.lambda_dc >= 0, "lambda_dc", "must be >= 0")
        need(0 < self.eta < 1, "eta", f"must lie strictly between 0 and 1, got {self.eta}")
        need(self.total_steps >= 0, "total_steps", "must be >= 0")
        need(0 <= self.warmup_steps <= self.total_steps, "warmup_steps",
             f"must lie in [0, total_steps={self.total_steps}], got {self.warmup_steps}")
        need(self.loss_variant in D.VARIANTS, "loss_variant",
             f"must be one of {', '.join(D.VARIANTS)}, got {self.loss_variant!r}")
        need(self.p >= 0, "p", "must be >= 0")
        need(self.loss_variant not in ("sampled", "kernelized") or self.p >= 1, "p",
             "sampled variants need p >= 1")
        need(1 <= self.n_groups <= self.adapted_width, "n_groups",
             f"must lie in [1, adapted_width={self.adapted_width}]")
        need(self.N >= 1, "N", "must be >= 1")
        need(self.gamma > 0, "gamma", "must be > 0")
        need(self.kernel_exponent in (1, 2), "kernel_exponent", "must be 1 or 2")
        need(self.entropy_weight >= 0, "entropy_weight", "must be >= 0")
        need(self.batch_size >= 2, "batch_size", "must be >= 2")
        need(0 <= self.alpha <= 1, "alpha", "must lie in [0, 1]")
        need(self.learning_rate > 0, "learning_rate", "must be > 0")
        need(all(h >= 1 for h in self.hidden_sizes), "hidden_sizes", "widths must be >= 1")
        need(self.adapted_width >= 1, "adapted_width", "must be >= 1")
        need(self.n_classes is None or self.n_classes >= 2, "n_classes", "must be >= 2")
        need(self.log_every >= 1, "log_every", "must be >= 1")
        need(self.eval_every >= 0, "eval_every", "must be >= 0")

    @property
    def effective_lambda_d(self) -> float:
        return default_lambda_d(self.p) if self.lambda_d is None else float(self.lambda_d)

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.gamma, self.kernel_exponent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def pseudo_label(probs, eta: float) -> PseudoLabelAssignment:
    """Rows whose top probability exceeds ``eta``, labelled by their argmax."""
    P = np.asarray(probs, dtype=np.float64)
    conf = P.max(axis=1)
    labels = P.argmax(axis=1)  # first maximum wins ties
    keep = np.flatnonzero(conf > eta)
    return PseudoLabelAssignment(keep, labels[keep].astype(np.int64), conf[keep])


def step_indices(config: TrainConfig, step_index: int) -> np.ndarray | None:
    if config.loss_variant not in ("sampled", "kernelized"):
        return None
    return sample_indices(config.adapted_width, config.p, config.N,
                          derive_seed(config.seed, step_index))


def train_step(net: MlpNetwork, opt_state: OptimizerState, centers: ClassCenters,
               source_batch, target_batch, config: TrainConfig, step_index: int):
    """One optimisation step on a source batch ``(x, y)`` and an unlabelled target batch.

    Returns ``(net, opt_state, centers, record)``.
    """
    xs, ys = source_batch
    xt = np.asarray(target_batch, dtype=np.float64)
    if step_index >= config.total_steps:
        raise ValueError(f"step_index {step_index} is past total_steps={config.total_steps}")
    clustering = step_index >= config.warmup_steps and config.lambda_dc > 0
    assignment = None
    ht = None
    if clustering:
        ht, pt = forward(net, xt)
        assignment = pseudo_label(pt, config.eta)
    objective = Objective(
        variant=config.loss_variant,
        lambda_d=config.effective_lambda_d,
        p=config.p,
        n_groups=config.n_groups,
        idx=step_indices(config, step_index),
        kernel=config.kernel,
        lambda_dc=config.lambda_dc if clustering else 0.0,
        centers=centers if clustering else None,
        assignment=assignment,
        entropy_weight=config.entropy_weight,
    )
    try:
        terms, grads = backward(net, xs, ys, xt, objective)
        new_net, new_state = optimizer_step(net, opt_state, grads)
    except NonFiniteError as exc:
        raise TrainingAborted(f"step {step_index}: {exc}") from exc
    if clustering:
        centers = D.update_centers(centers, ht, assignment,
                                   skip_absent=not config.strict_centers)
    record = {
        "step": step_index,
        "L_s": terms.source,
        "L_d": terms.discrepancy,
        "L_dc": terms.clustering,
        "L_ent": terms.entropy,
        "total": terms.total,
        "n_pseudo": len(assignment) if assignment is not None else 0,
    }
    return new_net, new_state, centers, record


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float | None]


def predict(net: MlpNetwork, X) -> np.ndarray:
    return forward(net, X)[1].argmax(axis=1)


def evaluate(net: MlpNetwork, dataset: LabeledDataset) -> EvalResult:
    """Overall and per-class accuracy; classes absent from the data map to ``None``."""
    if not dataset.has_labels:
        raise ValueError("evaluation needs a labelled dataset")
    pred = predict(net, dataset.features)
    hit = pred == dataset.labels
    per_class = {}
    for k in range(net.n_classes):
        mask = dataset.labels == k
        per_class[k] = float(hit[mask].mean()) if mask.any() else None
    return EvalResult(float(hit.mean()), per_class)


class BatchCycler:
    """Endless mini-batches over ``n`` rows, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < batch_size:
            raise ValueError(f"dataset of {n} rows is smaller than batch_size={batch_size}")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


@dataclass
class TrainMetrics:
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records if key in r]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class ExperimentResult:
    metrics: TrainMetrics
    network: MlpNetwork
    initial_network: MlpNetwork
    centers: ClassCenters
    source_accuracy: float | None
    target_accuracy: float | None
    target_eval: EvalResult | None = None


def layer_sizes_for(config: TrainConfig, n_inputs: int, n_classes: int) -> list[int]:
    return [n_inputs, *config.hidden_sizes, config.adapted_width, n_classes]


def run_experiment(config: TrainConfig, source: LabeledDataset, target: LabeledDataset,
                   on_record: Callable[[dict], None] | None = None) -> ExperimentResult:
    """Train from scratch for ``config.total_steps`` steps.

    Target labels, when present, are only read by evaluation.
    """
    if not source.has_labels:
        raise ValueError("source dataset needs labels")
    if source.features.shape[1] != target.features.shape[1]:
        raise ValueError(f"source has {source.features.shape[1]} features, "
                         f"target has {target.features.shape[1]}")
    n_classes = config.n_classes or int(source.labels.max()) + 1
    if source.labels.max() >= n_classes:
        raise ValueError(f"source labels exceed n_classes={n_classes}")
    train_target = target.unlabeled()

    net = init_network(layer_sizes_for(config, source.features.shape[1], n_classes),
                       seed=derive_seed(config.seed, 0))
    initial = net.copy()
    state = OptimizerState.for_params(net.params(), lr=config.learning_rate)
    centers = ClassCenters.zeros(n_classes, config.adapted_width, config.alpha)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    src_batches = BatchCycler(len(source), config.batch_size, rng)
    tgt_batches = BatchCycler(len(train_target), config.batch_size, rng)

    metrics = TrainMetrics()
    last = config.total_steps - 1
    for step in range(config.total_steps):
        si = src_batches.next()
        ti = tgt_batches.next()
        net, state, centers, record = train_step(
            net, state, centers, (source.features[si], source.labels[si]),
            train_target.features[ti], config, step)
        if step % config.log_every == 0 or step == last:
            if config.eval_every and (step % config.eval_every == 0 or step == last):
                record["source_acc"] = evaluate(net, source).accuracy
                if target.has_labels:
                    record["target_acc"] = evaluate(net, target).accuracy
            metrics.records.append(record)
            if on_record is not None:
                on_record(record)
    src_acc = evaluate(net, source).accuracy
    tgt_eval = evaluate(net, target) if target.has_labels else None
    log.info("finished %d steps: source acc %.4f, target acc %s", config.total_steps,
             src_acc, None if tgt_eval is None else f"{tgt_eval.accuracy:.4f}")
    return ExperimentResult(metrics, net, initial, centers, src_acc,
                            None if tgt_eval is None else tgt_eval.accuracy, tgt_eval)


def heldout_discrepancy(net: MlpNetwork, source: LabeledDataset, target: LabeledDataset,
                        config: TrainConfig, n_batches: int = 10, seed: int = 12345) -> float:
    """Mean discrepancy (per ``config.loss_variant``) over random batch pairs."""
    rng = np.random.default_rng(seed)
    vals = []
    for k in range(n_batches):
        hs, _ = forward(net, source.features[rng.choice(len(source), config.batch_size, False)])
        ht, _ = forward(net, target.features[rng.choice(len(target), config.batch_size, False)])
        idx = step_indices(config, k)
        vals.append(D.domain_discrepancy(config.loss_variant, hs, ht, p=config.p,
                                         n_groups=config.n_groups, idx=idx,
                                         kernel=config.kernel))
    return float(np.mean(vals))
