"""Baseline registry.

A baseline is anything that turns a :class:`~eventlab.frames.FrameStack` into
one descriptor row per frame. Register either an estimator factory (an
object with ``fit(reference_stack)`` and ``transform(stack)``) or a plain
callable ``stack -> array``. The harness owns formatting, distance
computation, metrics and cleanup around it.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone

from ..vpr import DenseSAD, SparseSAD

_REGISTRY: dict = {}


class UnknownBaselineError(KeyError):
    def __str__(self):
        return self.args[0]


class FunctionDescriptor(TransformerMixin, BaseEstimator):
    """Adapter turning ``func(stack) -> array`` into a stateless transformer."""

    def __init__(self, func=None, metric="sad"):
        self.func = func
        self.metric = metric

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.asarray(self.func(X), dtype=np.float64)

    def __sklearn_is_fitted__(self):
        return True  # stateless


def register_baseline(name, producer, metric="sad", replace=False):
    """Make ``producer`` callable by ``name`` from the CLI and configs."""
    if not replace and name in _REGISTRY:
        raise ValueError(f"baseline {name!r} is already registered")
    if isinstance(producer, BaseEstimator):
        template = producer
    elif isinstance(producer, type) and issubclass(producer, BaseEstimator):
        template = producer()
    elif callable(producer):
        template = FunctionDescriptor(producer, metric)
    else:
        raise TypeError("producer must be an estimator or a callable")
    _REGISTRY[name] = template


def unregister_baseline(name):
    _REGISTRY.pop(name, None)


def registered_baselines():
    return sorted(_REGISTRY)


def get_baseline(name, **params):
    """Fresh, unfitted copy of the registered baseline."""
    try:
        template = _REGISTRY[name]
    except KeyError:
        raise UnknownBaselineError(
            f"unknown baseline {name!r}; registered: {', '.join(registered_baselines())}") from None
    est = clone(template)
    return est.set_params(**params) if params else est


def baseline_metric(estimator):
    return getattr(estimator, "metric", "sad")


register_baseline("dense_sad", DenseSAD(downsample=4))
register_baseline("sparse_event", SparseSAD(n_pixels=0.05))
