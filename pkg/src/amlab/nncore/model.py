"""Layered classifier with explicit forward/backward passes."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from amlab.errors import DimensionError
from amlab.nncore.layers import (
    LayerSpec,
    check_composition,
    init_params,
    layer_backward,
    layer_forward,
    param_shapes,
)
from amlab.nncore.losses import softmax


class Classifier:
    """A stack of layers ending in ``softmax-output``.

    The object holds parameters only; forward passes return their caches
    instead of stashing them, so a trained instance can be evaluated from
    several threads at once.
    """

    def __init__(self, layers: Sequence[LayerSpec], params: list[dict] | None = None):
        self.layers = tuple(layers)
        check_composition(self.layers)
        if params is None:
            params = [init_params(spec) for spec in self.layers]
        if len(params) != len(self.layers):
            raise DimensionError("one parameter dict per layer is required")
        for spec, p in zip(self.layers, params):
            for name, shape in param_shapes(spec).items():
                if name not in p or np.shape(p[name]) != shape:
                    raise DimensionError(f"{spec.kind} parameter {name!r} has the wrong shape")
        self.params = [{k: np.array(v, dtype=np.float64, order="C") for k, v in p.items()} for p in params]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def num_classes(self) -> int:
        return self.layers[-1].dims[0]

    @property
    def num_parameters(self) -> int:
        return sum(a.size for p in self.params for a in p.values())

    def copy(self) -> "Classifier":
        return Classifier(self.layers, self.params)

    def _check_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1:] != self.input_shape:
            raise DimensionError(f"model expects inputs of shape {self.input_shape}, got batch {X.shape}")
        return X

    def forward_cached(self, X):
        """Return ``(logits, caches)`` for a batch."""
        h = self._check_batch(X)
        caches = []
        for spec, p in zip(self.layers, self.params):
            h, cache = layer_forward(spec, p, h)
            caches.append(cache)
        return h, caches

    def backward(self, caches, dlogits: np.ndarray):
        """Backpropagate ``dloss/dlogits``; returns ``(param_grads, dX)``."""
        grads: list[dict] = [None] * len(self.layers)
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            d, grads[i] = layer_backward(self.layers[i], self.params[i], caches[i], d)
        return grads, d

    def logits(self, X) -> np.ndarray:
        return self.forward_cached(X)[0]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def __call__(self, X) -> np.ndarray:
        return self.predict_proba(X)

    def __repr__(self):
        arch = " -> ".join(f"{s.kind}{list(s.dims)}" for s in self.layers)
        return f"Classifier({arch}, params={self.num_parameters})"


def forward(model: Classifier, x) -> np.ndarray:
    """Probability vector for a single input ``x`` of the model's input shape."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise DimensionError(f"model expects an input of shape {model.input_shape}, got {x.shape}")
    return model.predict_proba(x[None])[0]


def dense_net(input_dim: int, num_classes: int, hidden: int | None = 64, seed: int = 0) -> Classifier:
    """input -> hidden -> K with a ReLU; ``hidden=None`` gives softmax regression."""
    if hidden is None:
        layers = [LayerSpec("dense", (input_dim, num_classes), seed * 16)]
    else:
        layers = [
            LayerSpec("dense", (input_dim, hidden), seed * 16),
            LayerSpec("relu", (hidden,)),
            LayerSpec("dense", (hidden, num_classes), seed * 16 + 1),
        ]
    layers.append(LayerSpec("softmax-output", (num_classes,)))
    return Classifier(layers)


def conv_net(
    height: int,
    width: int,
    num_classes: int,
    channels: int = 1,
    filters: int = 4,
    kernel: int = 5,
    stride: int = 2,
    seed: int = 0,
) -> Classifier:
    """One convolution, ReLU, then a dense layer to the classes."""
    conv = LayerSpec("conv2d-small", (channels, height, width, filters, kernel, stride), seed * 16)
    flat = int(np.prod(conv.out_shape))
    layers = [
        conv,
        LayerSpec("relu", conv.out_shape),
        LayerSpec("flatten", conv.out_shape),
        LayerSpec("dense", (flat, num_classes), seed * 16 + 1),
        LayerSpec("softmax-output", (num_classes,)),
    ]
    return Classifier(layers)
