"""Layer specifications with their forward and backward rules.

Every layer works on a leading batch axis. Parameterised layers keep their
arrays in a plain dict (``W``, ``b``) so the optimiser and the persistence code
can walk them without knowing the layer type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from amlab.errors import ConfigurationError, DimensionError

LAYER_KINDS = ("dense", "relu", "conv2d-small", "flatten", "softmax-output")

# dims layout per kind:
#   dense           (n_in, n_out)
#   relu            input shape, any rank
#   conv2d-small    (in_channels, height, width, out_channels, kernel, stride)
#   flatten         input shape
#   softmax-output  (num_classes,)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple[int, ...]
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d <= 0 for d in dims):
            raise ConfigurationError(f"{self.kind} layer needs positive dims, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if self.kind == "dense" and len(dims) != 2:
            raise ConfigurationError("dense dims are (n_in, n_out)")
        if self.kind == "softmax-output" and (len(dims) != 1 or dims[0] < 2):
            raise ConfigurationError("softmax-output dims are (num_classes,) with num_classes >= 2")
        if self.kind == "conv2d-small":
            if len(dims) != 6:
                raise ConfigurationError(
                    "conv2d-small dims are (in_channels, height, width, out_channels, kernel, stride)"
                )
            _, h, w, _, k, _ = dims
            if k > h or k > w:
                raise ConfigurationError("conv kernel larger than its input")

    @property
    def in_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.dims[0],)
        if self.kind == "conv2d-small":
            return self.dims[:3]
        return self.dims

    @property
    def out_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.dims[1],)
        if self.kind == "conv2d-small":
            _, h, w, oc, k, s = self.dims
            return (oc, (h - k) // s + 1, (w - k) // s + 1)
        if self.kind == "flatten":
            return (int(np.prod(self.dims)),)
        return self.dims

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "init_seed": self.init_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], tuple(d["dims"]), int(d.get("init_seed", 0)))


def check_composition(layers) -> None:
    if not layers:
        raise ConfigurationError("a classifier needs at least one layer")
    for i in range(len(layers) - 1):
        if layers[i].out_shape != layers[i + 1].in_shape:
            raise DimensionError(
                f"layer {i} ({layers[i].kind}) outputs {layers[i].out_shape} but layer "
                f"{i + 1} ({layers[i + 1].kind}) expects {layers[i + 1].in_shape}"
            )
    if layers[-1].kind != "softmax-output":
        raise ConfigurationError("the last layer must be softmax-output")
    if any(layer.kind == "softmax-output" for layer in layers[:-1]):
        raise ConfigurationError("softmax-output may only appear last")


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "dense":
        return {"W": spec.dims, "b": (spec.dims[1],)}
    if spec.kind == "conv2d-small":
        c, _, _, oc, k, _ = spec.dims
        return {"W": (oc, c, k, k), "b": (oc,)}
    return {}


def init_params(spec: LayerSpec) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(spec.init_seed)
    if spec.kind == "dense":
        n_in, n_out = spec.dims
        bound = 1.0 / np.sqrt(n_in)
        return {
            "W": rng.uniform(-bound, bound, size=(n_in, n_out)),
            "b": rng.uniform(-bound, bound, size=(n_out,)),
        }
    if spec.kind == "conv2d-small":
        c, _, _, oc, k, _ = spec.dims
        bound = 1.0 / np.sqrt(c * k * k)
        return {
            "W": rng.uniform(-bound, bound, size=(oc, c, k, k)),
            "b": rng.uniform(-bound, bound, size=(oc,)),
        }
    return {}


def _windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    # (N, C, H, W) -> (N, C, OH, OW, k, k)
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def layer_forward(spec: LayerSpec, params: dict, x: np.ndarray):
    """Return ``(output, cache)``; softmax-output passes logits through."""
    kind = spec.kind
    if kind == "dense":
        return x @ params["W"] + params["b"], x
    if kind == "relu":
        return np.maximum(x, 0.0), x
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if kind == "conv2d-small":
        k, s = spec.dims[4], spec.dims[5]
        win = _windows(x, k, s)
        out = np.einsum("nchwij,ocij->nohw", win, params["W"], optimize=True)
        return out + params["b"][None, :, None, None], x
    return x, None


def layer_backward(spec: LayerSpec, params: dict, cache, dout: np.ndarray):
    """Return ``(dx, grads)`` where grads mirrors the keys of ``params``."""
    kind = spec.kind
    if kind == "dense":
        x = cache
        return dout @ params["W"].T, {"W": x.T @ dout, "b": dout.sum(axis=0)}
    if kind == "relu":
        return dout * (cache > 0), {}
    if kind == "flatten":
        return dout.reshape(cache), {}
    if kind == "conv2d-small":
        x = cache
        k, s = spec.dims[4], spec.dims[5]
        W = params["W"]
        win = _windows(x, k, s)
        dW = np.einsum("nchwij,nohw->ocij", win, dout, optimize=True)
        db = dout.sum(axis=(0, 2, 3))
        dx = np.zeros_like(x)
        oh, ow = dout.shape[2], dout.shape[3]
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += np.einsum(
                    "nohw,oc->nchw", dout, W[:, :, i, j]
                )
        return dx, {"W": dW, "b": db}
    return dout, {}
