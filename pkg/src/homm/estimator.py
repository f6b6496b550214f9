"""scikit-learn compatible wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from homm import discrepancy as D
from homm.data import LabeledDataset
from homm.network import forward
from homm.trainer import TrainConfig, run_experiment, step_indices


class HoMMClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Neural classifier trained on labelled source data while aligning the
    moment tensors of its adapted-layer features with an unlabelled target set.

    Parameters mirror :class:`homm.trainer.TrainConfig`; ``random_state``
    maps to its ``seed``. ``transform`` returns adapted-layer features.

    Examples
    --------
    >>> clf = HoMMClassifier(p=3, lambda_d=1e3, total_steps=200, adapted_width=16)
    >>> clf.fit(Xs, ys, X_target=Xt).score(Xt, yt)  # doctest: +SKIP
    """

    def __init__(self, loss_variant="full", p=3, lambda_d=None, lambda_dc=0.0, eta=0.8,
                 warmup_steps=0, n_groups=1, N=1000, gamma=1e-4, kernel_exponent=2,
                 entropy_weight=0.0, alpha=0.5, batch_size=64, total_steps=1000,
                 learning_rate=1e-3, hidden_sizes=(32, 32), adapted_width=64,
                 random_state=0):
        self.loss_variant = loss_variant
        self.p = p
        self.lambda_d = lambda_d
        self.lambda_dc = lambda_dc
        self.eta = eta
        self.warmup_steps = warmup_steps
        self.n_groups = n_groups
        self.N = N
        self.gamma = gamma
        self.kernel_exponent = kernel_exponent
        self.entropy_weight = entropy_weight
        self.alpha = alpha
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.learning_rate = learning_rate
        self.hidden_sizes = hidden_sizes
        self.adapted_width = adapted_width
        self.random_state = random_state

    def _config(self, n_source, n_target, n_classes) -> TrainConfig:
        return TrainConfig(
            lambda_d=self.lambda_d, lambda_dc=self.lambda_dc, eta=self.eta,
            warmup_steps=self.warmup_steps, loss_variant=self.loss_variant, p=self.p,
            n_groups=self.n_groups, N=self.N, gamma=self.gamma,
            kernel_exponent=self.kernel_exponent, entropy_weight=self.entropy_weight,
            batch_size=max(2, min(self.batch_size, n_source, n_target)),
            total_steps=self.total_steps, alpha=self.alpha, seed=int(self.random_state or 0),
            learning_rate=self.learning_rate, hidden_sizes=tuple(self.hidden_sizes),
            adapted_width=self.adapted_width, n_classes=max(n_classes, 2),
            eval_every=0, log_every=max(1, self.total_steps // 100))

    def fit(self, X, y, X_target=None):
        """Train on source ``(X, y)``; ``X_target`` is the unlabelled target sample.

        Without ``X_target`` the source inputs double as the target, which
        reduces to plain supervised training up to the discrepancy noise.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        Xt = X if X_target is None else check_array(X_target, dtype=np.float64)
        if Xt.shape[1] != X.shape[1]:
            raise ValueError(f"X_target has {Xt.shape[1]} features, X has {X.shape[1]}")
        if len(X) < 2 or len(Xt) < 2:
            raise ValueError("need at least 2 source and 2 target samples")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        config = self._config(len(X), len(Xt), len(self.classes_))
        result = run_experiment(config, LabeledDataset(X, y_enc, "source"),
                                LabeledDataset(Xt, None, "target"))
        self.config_ = config
        self.network_ = result.network
        self.centers_ = result.centers
        self.metrics_ = result.metrics
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with "
                             f"{self.n_features_in_}")
        return X

    def predict_proba(self, X):
        X = self._check(X)
        probs = forward(self.network_, X)[1]
        return probs[:, :len(self.classes_)] / probs[:, :len(self.classes_)].sum(1, keepdims=True)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        """Adapted-layer features, each entry in (-1, 1)."""
        return forward(self.network_, self._check(X))[0]

    def discrepancy(self, X_source, X_target) -> float:
        """The configured discrepancy between the adapted features of two samples."""
        hs, ht = self.transform(X_source), self.transform(X_target)
        n = min(len(hs), len(ht))
        cfg = self.config_
        return D.domain_discrepancy(cfg.loss_variant, hs[:n], ht[:n], p=cfg.p,
                                    n_groups=cfg.n_groups, idx=step_indices(cfg, 0),
                                    kernel=cfg.kernel)
