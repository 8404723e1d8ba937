"""Minibatch SGD training and finite-difference gradient verification."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from amlab.errors import ConfigurationError, DivergenceError
from amlab.nncore import losses
from amlab.nncore.model import Classifier

log = logging.getLogger(__name__)

LOSS_KINDS = ("standard", "reverse", "standard+oe", "distill")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    oe_weight: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if int(self.epochs) < 1:
            raise ConfigurationError("epochs must be >= 1")
        if int(self.batch_size) < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.oe_weight < 0:
            raise ConfigurationError("oe_weight must be >= 0")
        if int(self.rng_seed) < 0:
            raise ConfigurationError("rng_seed must be a non-negative integer")

    def to_dict(self) -> dict:
        return asdict(self)


def _loss_grad(probs, kind, labels=None, targets=None):
    if kind == "reverse":
        return losses.reverse_ce_grad(probs, labels)
    if kind == "uniform":
        return losses.uniform_ce_grad(probs)
    return losses.soft_ce_grad(probs, targets)


def _sgd_step(model: Classifier, grads, lr: float) -> None:
    for p, g in zip(model.params, grads):
        for name in p:
            p[name] -= lr * g[name]


def train(
    model: Classifier,
    data,
    cfg: TrainConfig,
    loss_kind: str = "standard",
    outliers=None,
):
    """Train a copy of ``model``; returns ``(trained_model, per_epoch_mean_loss)``.

    ``data`` needs ``inputs`` and ``labels`` (or ``targets`` for ``distill``).
    ``standard+oe`` adds ``oe_weight`` times the cross-entropy to the uniform
    distribution on a same-sized batch of ``outliers`` at every step. Outlier
    batches come from their own generator, so the in-distribution batch order
    does not depend on whether outliers are used.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    if getattr(data, "role", None) == "defender-test":
        raise ConfigurationError("refusing to train on a defender-test dataset")
    X = np.asarray(data.inputs, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    k = model.num_classes
    if loss_kind == "distill":
        T = np.asarray(data.targets, dtype=np.float64)
        labels = T.argmax(axis=1)
    else:
        labels = np.asarray(data.labels, dtype=np.int64)
        T = losses.one_hot(labels, k)
    Xo = None
    if loss_kind == "standard+oe":
        if outliers is None or len(outliers.inputs) == 0:
            raise ConfigurationError("loss_kind 'standard+oe' requires a non-empty outlier set")
        if getattr(outliers, "role", None) == "defender-test":
            raise ConfigurationError("refusing to use a defender-test dataset as outliers")
        Xo = np.asarray(outliers.inputs, dtype=np.float64)

    model = model.copy()
    rng = np.random.default_rng([cfg.rng_seed, 0])
    orng = np.random.default_rng([cfg.rng_seed, 1])
    kind = "reverse" if loss_kind == "reverse" else "ce"
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits, caches = model.forward_cached(X[idx])
            loss, dz = _loss_grad(losses.softmax(logits), kind, labels[idx], T[idx])
            grads, _ = model.backward(caches, dz)
            if Xo is not None:
                oidx = orng.integers(0, Xo.shape[0], size=idx.shape[0])
                ologits, ocaches = model.forward_cached(Xo[oidx])
                oloss, odz = _loss_grad(losses.softmax(ologits), "uniform")
                ograds, _ = model.backward(ocaches, odz)
                lam = cfg.oe_weight
                grads = [{name: g[name] + lam * og[name] for name in g} for g, og in zip(grads, ograds)]
                loss += lam * oloss
            _sgd_step(model, grads, cfg.learning_rate)
            total += loss * idx.shape[0]
        history.append(total / n)
        if not np.isfinite(history[-1]) or not all(np.all(np.isfinite(a)) for p in model.params for a in p.values()):
            raise DivergenceError(f"non-finite loss or parameters at epoch {epoch}; lower the learning rate")
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return model, history


def input_gradient(model: Classifier, X, labels) -> np.ndarray:
    """d(cross-entropy at ``labels``)/d(input), one row per example."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    logits, caches = model.forward_cached(X)
    # per-example gradients, so undo the batch mean
    _, dz = losses.soft_ce_grad(losses.softmax(logits), losses.one_hot(labels, model.num_classes))
    _, dX = model.backward(caches, dz * X.shape[0])
    return dX


def _scalar_loss(model, x, loss_kind, target, outlier, oe_weight) -> float:
    p = model.predict_proba(x[None])[0]
    if loss_kind == "standard":
        return losses.cross_entropy(p, target)
    if loss_kind == "reverse":
        return losses.reverse_cross_entropy(p, target)
    if loss_kind == "distill":
        return losses.distillation_loss(p, target)
    po = model.predict_proba(outlier[None])[0]
    return losses.cross_entropy(p, target) + oe_weight * losses.cross_entropy_to_uniform(po)


def _analytic_grads(model, x, loss_kind, target, outlier, oe_weight):
    k = model.num_classes
    logits, caches = model.forward_cached(x[None])
    probs = losses.softmax(logits)
    if loss_kind == "reverse":
        _, dz = losses.reverse_ce_grad(probs, np.array([int(target)]))
    elif loss_kind == "distill":
        _, dz = losses.soft_ce_grad(probs, np.asarray(target, dtype=np.float64)[None])
    else:
        _, dz = losses.soft_ce_grad(probs, losses.one_hot([int(target)], k))
    grads, _ = model.backward(caches, dz)
    if loss_kind == "standard+oe":
        ologits, ocaches = model.forward_cached(outlier[None])
        _, odz = losses.uniform_ce_grad(losses.softmax(ologits))
        ograds, _ = model.backward(ocaches, odz)
        grads = [{n: g[n] + oe_weight * og[n] for n in g} for g, og in zip(grads, ograds)]
    return grads


def gradient_check(
    model: Classifier,
    x,
    loss_kind: str,
    target,
    outlier=None,
    oe_weight: float = 0.5,
    step: float = 1e-5,
) -> float:
    """Largest ``|analytic - numeric| / (|numeric| + 1e-8)`` over all parameters.

    The numeric side differentiates the public scalar loss functions by
    central differences, so it shares nothing with the backward pass except
    the forward evaluation. ``target`` is a class index, or a probability
    vector for ``distill``.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "standard+oe" and outlier is None:
        raise ConfigurationError("standard+oe needs an outlier input")
    x = np.asarray(x, dtype=np.float64)
    if outlier is not None:
        outlier = np.asarray(outlier, dtype=np.float64)
    probe = model.copy()
    grads = _analytic_grads(probe, x, loss_kind, target, outlier, oe_weight)
    worst = 0.0
    for p, g in zip(probe.params, grads):
        for name, arr in p.items():
            flat = arr.reshape(-1)
            gflat = g[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = _scalar_loss(probe, x, loss_kind, target, outlier, oe_weight)
                flat[i] = orig - step
                down = _scalar_loss(probe, x, loss_kind, target, outlier, oe_weight)
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                worst = max(worst, abs(gflat[i] - numeric) / (abs(numeric) + 1e-8))
    return worst
