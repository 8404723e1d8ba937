"""Datasets and their roles: defender train/test, outliers, surrogate, seed.

Synthetic tasks are Gaussian clusters, one per class. The attacker's surrogate
distribution is the same clusters moved and widened; the defender's outlier
set for outlier exposure comes from an unrelated set of clusters so the
defense never sees the attacker's data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from amlab.errors import ConfigurationError, DimensionError, FormatError
from amlab.storage import DATASET_MAGIC, pack, unpack, write_file

ROLES = ("defender-train", "defender-test", "outlier", "surrogate", "seed")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    role: str
    name: str = ""
    num_classes: int = 2

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"role must be one of {ROLES}, got {self.role!r}")
        inputs = _frozen(self.inputs, np.float64)
        labels = _frozen(self.labels, np.int64)
        if labels.ndim != 1 or inputs.shape[:1] != labels.shape:
            raise DimensionError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.role, name or self.name, self.num_classes)

    def with_role(self, role: str, name: str | None = None) -> "LabeledDataset":
        """A relabelled copy; the original keeps its role."""
        return LabeledDataset(self.inputs, self.labels, role, name or self.name, self.num_classes)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int
    input_dim: int
    cluster_centers: np.ndarray
    cluster_std: float
    samples_per_class: int
    rng_seed: int = 0

    def __post_init__(self):
        centers = _frozen(self.cluster_centers, np.float64)
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if centers.shape != (self.num_classes, self.input_dim):
            raise DimensionError(f"cluster_centers must have shape ({self.num_classes}, {self.input_dim})")
        if self.cluster_std < 0:
            raise ConfigurationError("cluster_std must be >= 0")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        object.__setattr__(self, "cluster_centers", centers)

    def min_center_distance(self) -> float:
        c = self.cluster_centers
        d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        return float(d[np.triu_indices(self.num_classes, 1)].min())


def separable_preset(
    num_classes: int = 10,
    input_dim: int = 20,
    cluster_std: float = 0.1,
    samples_per_class: int = 100,
    rng_seed: int = 0,
) -> SyntheticTaskSpec:
    """Class centers drawn uniformly from the unit cube, far apart relative to the spread.

    Centers are redrawn until every pair is more than 4 * cluster_std apart.
    """
    rng = np.random.default_rng([rng_seed, 7])
    for _ in range(1000):
        centers = rng.uniform(0.0, 1.0, size=(num_classes, input_dim))
        spec = SyntheticTaskSpec(num_classes, input_dim, centers, cluster_std, samples_per_class, rng_seed)
        if spec.min_center_distance() > 4 * cluster_std:
            return spec
    raise ConfigurationError("could not place separable centers; lower cluster_std or raise input_dim")


def _gaussian_clusters(centers, std, per_class, rng):
    k, d = centers.shape
    labels = np.repeat(np.arange(k), per_class)
    noise = rng.standard_normal((k * per_class, d)) * std
    inputs = centers[labels] + noise
    order = rng.permutation(labels.shape[0])
    return inputs[order], labels[order]


def generate_synthetic(spec: SyntheticTaskSpec, role: str = "defender-train", name: str = "synthetic") -> LabeledDataset:
    rng = np.random.default_rng([spec.rng_seed, 11])
    x, y = _gaussian_clusters(spec.cluster_centers, spec.cluster_std, spec.samples_per_class, rng)
    return LabeledDataset(x, y, role, name, spec.num_classes)


def generate_surrogate(spec: SyntheticTaskSpec, shift, scale: float, name: str = "surrogate") -> LabeledDataset:
    """Clusters moved by ``shift`` and widened by ``scale``; labels are dummies.

    Uses its own random stream, so ``shift=0, scale=1`` draws fresh samples
    from exactly the defender's distribution.
    """
    if scale <= 0:
        raise ConfigurationError("scale must be > 0")
    shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), (spec.input_dim,))
    rng = np.random.default_rng([spec.rng_seed, 13])
    x, _ = _gaussian_clusters(spec.cluster_centers + shift, spec.cluster_std * scale, spec.samples_per_class, rng)
    return LabeledDataset(x, np.zeros(x.shape[0], dtype=np.int64), "surrogate", name, spec.num_classes)


def surrogate_shift(spec: SyntheticTaskSpec, multiple: float = 4.0) -> np.ndarray:
    """Shift vector moving every coordinate by ``multiple * cluster_std``.

    The sign of each coordinate is fixed by the task seed.
    """
    rng = np.random.default_rng([spec.rng_seed, 17])
    signs = rng.choice([-1.0, 1.0], size=spec.input_dim)
    return signs * multiple * spec.cluster_std


def generate_outliers(spec: SyntheticTaskSpec, count: int | None = None, name: str = "outlier") -> LabeledDataset:
    """Samples from a foreign cluster task on the same input space.

    The foreign centers are fresh uniform draws, each cluster twice as wide as
    the defender's; labels are dummies.
    """
    rng = np.random.default_rng([spec.rng_seed, 19])
    k = spec.num_classes
    count = count or k * spec.samples_per_class
    centers = rng.uniform(0.0, 1.0, size=(k, spec.input_dim))
    x, _ = _gaussian_clusters(centers, 2 * spec.cluster_std, -(-count // k), rng)
    x = x[:count]
    return LabeledDataset(x, np.zeros(count, dtype=np.int64), "outlier", name, spec.num_classes)


def split(dataset: LabeledDataset, fraction: float, rng_seed: int = 0):
    """Shuffle and cut into ``(first, rest)`` with ``round(fraction * n)`` items first."""
    if not 0 < fraction < 1:
        raise ConfigurationError("split fraction must lie strictly between 0 and 1")
    n = len(dataset)
    perm = np.random.default_rng(rng_seed).permutation(n)
    cut = int(round(fraction * n))
    return dataset.subset(perm[:cut]), dataset.subset(perm[cut:])


# -- IDX files ---------------------------------------------------------------


def _read_idx(path, magic: int, ndim: int):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX magic number", len(data))
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise FormatError(f"{path}: truncated IDX header", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) < header_len + count:
        raise FormatError(f"{path}: truncated IDX payload, expected {count} bytes", len(data))
    if len(data) > header_len + count:
        raise FormatError(f"{path}: trailing bytes after IDX payload", header_len + count)
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def load_idx_images(path, labels_path, role: str = "defender-train", num_classes: int = 10, name: str | None = None):
    """Read an IDX image/label pair; pixels become ``byte / 255`` with a channel axis.

    Surrogate and outlier files may come without labels (``labels_path=None``);
    their labels are zeroed either way.
    """
    images = _read_idx(path, IDX_IMAGES_MAGIC, 3)
    unlabelled = role in ("surrogate", "outlier")
    if labels_path is None:
        if not unlabelled:
            raise ConfigurationError(f"role {role!r} needs a label file")
        labels = np.zeros(images.shape[0], dtype=np.uint8)
    else:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    if unlabelled:
        labels = np.zeros_like(labels)
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(x, labels.astype(np.int64), role, name or Path(path).stem, num_classes)


def write_idx_images(path, images: np.ndarray) -> Path:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise DimensionError("IDX images must be (count, rows, cols)")
    head = struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape)
    return write_file(path, head + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> Path:
    labels = np.asarray(labels, dtype=np.uint8)
    return write_file(path, struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# -- dataset files -----------------------------------------------------------


def dataset_to_bytes(ds, provenance: dict | None = None) -> bytes:
    """Serialise a LabeledDataset, or anything with ``inputs``/``targets`` (a harvest)."""
    header = {"kind": "dataset", "name": getattr(ds, "name", ""), "provenance": provenance or {}}
    arrays = [("inputs", ds.inputs)]
    if isinstance(ds, LabeledDataset):
        header.update(role=ds.role, num_classes=ds.num_classes)
        arrays.append(("labels", ds.labels))
    else:
        header.update(role="harvest", num_classes=int(np.asarray(ds.targets).shape[1]))
        arrays.append(("targets", ds.targets))
    return pack(DATASET_MAGIC, header, arrays)


def dataset_from_bytes(data: bytes):
    """Return ``(header, arrays)``; a labelled dataset is rebuilt when present."""
    header, arrays = unpack(data, DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise FormatError("container does not hold a dataset", 14)
    if "labels" in arrays:
        ds = LabeledDataset(arrays["inputs"], arrays["labels"], header["role"], header["name"], header["num_classes"])
        return header, ds
    return header, arrays


def save_dataset(ds, path, provenance: dict | None = None) -> Path:
    return write_file(path, dataset_to_bytes(ds, provenance))


def load_dataset(path):
    return dataset_from_bytes(Path(path).read_bytes())


@dataclass
class TaskBundle:
    """Every dataset one experiment seed needs, plus where each came from."""

    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    outliers: LabeledDataset
    surrogate: LabeledDataset
    seed_pool: LabeledDataset
    manifest: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.train.input_shape

    def write_manifest(self, path) -> Path:
        text = json.dumps(self.manifest, sort_keys=True, indent=2) + "\n"
        return write_file(path, text.encode())


def synthetic_bundle(
    spec: SyntheticTaskSpec,
    surrogate_shift_multiple: float = 4.0,
    surrogate_scale: float = 1.0,
    test_per_class: int = 100,
    seed_pool_per_class: int = 50,
) -> TaskBundle:
    """Build every role for one synthetic task.

    train/val are a 80/20 split of one sample; test, the attacker's seed pool,
    the surrogate and the outliers are separate draws.
    """
    s = spec.rng_seed
    full = generate_synthetic(spec, "defender-train", "train")
    train, val = split(full, 0.8, rng_seed=s)
    val = val.with_role("defender-test", "val")
    test_spec = replace(spec, samples_per_class=test_per_class, rng_seed=s + 100_003)
    test = generate_synthetic(test_spec, "defender-test", "test")
    pool_spec = replace(spec, samples_per_class=seed_pool_per_class, rng_seed=s + 200_003)
    pool = generate_synthetic(pool_spec, "seed", "seed_pool")
    shift = surrogate_shift(spec, surrogate_shift_multiple)
    surrogate = generate_surrogate(spec, shift, surrogate_scale)
    outliers = generate_outliers(spec)
    manifest = {
        "train": {"source": "synthetic", "seed": s, "split": "80%", "size": len(train)},
        "val": {"source": "synthetic", "seed": s, "split": "20%", "size": len(val)},
        "test": {"source": "synthetic", "seed": s + 100_003, "size": len(test)},
        "seed_pool": {"source": "synthetic", "seed": s + 200_003, "size": len(pool)},
        "surrogate": {
            "source": "shifted-synthetic",
            "seed": s,
            "shift_multiple": surrogate_shift_multiple,
            "scale": surrogate_scale,
            "size": len(surrogate),
        },
        "outliers": {"source": "foreign-clusters", "seed": s, "size": len(outliers)},
    }
    return TaskBundle(train, val, test, outliers, surrogate, pool, manifest)
