"""scikit-learn style wrappers around the trainer and the quantizers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .analysis import outlier_quantize
from .data import Dataset
from .models import MLP, _softmax
from .quant import QuantFormat, dequantize, fit_scale, quantize
from .trainer import TrainConfig, train


class QuZOClassifier(ClassifierMixin, BaseEstimator):
    """MLP classifier trained with quantized zeroth-order steps.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths.
    optimizer : {"quzo", "quzo-rge1", "mezo-fp", "ste-fo"}
    weight_format, act_format, perturbation_format : str or None
        ``None`` keeps that part in float64.
    steps, lr, epsilon, queries, batch_size : training budget.
    headroom : float
        Multiplier on the calibrated weight range, leaving room to grow.
    seed : int
    """

    def __init__(self, hidden=(32,), optimizer="quzo", weight_format="INT8", act_format="INT8",
                 perturbation_format="INT8", steps=500, lr=1e-2, epsilon=0.05, queries=4,
                 batch_size=64, headroom=1.0, weight_decay=0.0, seed=0):
        self.hidden = hidden
        self.optimizer = optimizer
        self.weight_format = weight_format
        self.act_format = act_format
        self.perturbation_format = perturbation_format
        self.steps = steps
        self.lr = lr
        self.epsilon = epsilon
        self.queries = queries
        self.batch_size = batch_size
        self.headroom = headroom
        self.weight_decay = weight_decay
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, epsilon=self.epsilon, queries=self.queries,
                           batch_size=self.batch_size, weight_format=self.weight_format,
                           act_format=self.act_format, perturbation_format=self.perturbation_format,
                           optimizer=self.optimizer, headroom=self.headroom,
                           weight_decay=self.weight_decay, seed=self.seed, eval_every=0)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        self.n_features_in_ = X.shape[1]
        config = self._config()
        n_out = max(len(self.classes_), 2)
        model = MLP([X.shape[1], *self.hidden, n_out], seed=self.seed)
        self.model_, self.log_ = train(model, Dataset(X, self._encoder.transform(y)), config)
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.output(X)

    def predict_proba(self, X):
        return _softmax(self._logits(X))[:, :len(self.classes_)]

    def predict(self, X):
        idx = np.argmax(self._logits(X)[:, :len(self.classes_)], axis=1)
        return self.classes_[idx]


class QuantizerTransformer(TransformerMixin, BaseEstimator):
    """Fake-quantizes features: calibrates on ``fit``, rounds and dequantizes on ``transform``.

    ``granularity="per-channel"`` keeps one scale per feature column.
    ``rounding="stochastic"`` draws from a stream seeded by ``seed`` on every call.
    """

    def __init__(self, format="INT8", granularity="per-tensor", rounding="nearest", seed=0):
        self.format = format
        self.granularity = granularity
        self.rounding = rounding
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self.scheme_ = fit_scale(X, QuantFormat.parse(self.format), self.granularity, axis=1,
                                 rounding=self.rounding)
        return self

    def quantize(self, X):
        check_is_fitted(self, "scheme_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return quantize(X, self.scheme_, self.seed if self.rounding == "stochastic" else None)

    def transform(self, X):
        return dequantize(self.quantize(X))


class OutlierQuantizer(TransformerMixin, BaseEstimator):
    """INT8 storage with an FP8 side-table for the top ``alpha`` fraction of magnitudes."""

    def __init__(self, alpha=0.01):
        self.alpha = alpha

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        self.encoded_ = outlier_quantize(X, self.alpha)
        return self.encoded_.dequantize()
