"""Save and load classifiers in the amlab model container (see ``amlab.storage``).

The header carries ``{"kind": "classifier", "layers": [...], "num_classes": K}``
and the arrays are named ``"<layer index>.<param name>"`` in layer order, W
before b.
"""

from __future__ import annotations

from pathlib import Path

from amlab.errors import FormatError
from amlab.nncore.layers import LayerSpec, param_shapes
from amlab.nncore.model import Classifier
from amlab.storage import MODEL_MAGIC, pack, unpack, write_file


def classifier_to_bytes(model: Classifier) -> bytes:
    header = {
        "kind": "classifier",
        "layers": [spec.to_dict() for spec in model.layers],
        "num_classes": model.num_classes,
    }
    arrays = []
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        for name in param_shapes(spec):
            arrays.append((f"{i}.{name}", p[name]))
    return pack(MODEL_MAGIC, header, arrays)


def classifier_from_bytes(data: bytes) -> Classifier:
    header, arrays = unpack(data, MODEL_MAGIC)
    if header.get("kind") != "classifier":
        raise FormatError("container does not hold a classifier", 14)
    layers = [LayerSpec.from_dict(d) for d in header["layers"]]
    params = []
    for i, spec in enumerate(layers):
        p = {}
        for name in param_shapes(spec):
            key = f"{i}.{name}"
            if key not in arrays:
                raise FormatError(f"missing parameter array {key!r}")
            p[name] = arrays[key]
        params.append(p)
    return Classifier(layers, params)


def save_classifier(model: Classifier, path) -> Path:
    return write_file(path, classifier_to_bytes(model))


def load_classifier(path) -> Classifier:
    return classifier_from_bytes(Path(path).read_bytes())
