"""Per-seed experiment setup shared by the sweep harness and the CLI.

For a seed ``s`` every random choice is derived from ``s`` alone: the task
draw, the defender and misinformer initialisation and SGD order, the clone's
initialisation and the attacker's sampling. Two runs with the same config
and seed therefore train bit-identical models.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, replace

import numpy as np

from amlab.config import ExperimentConfig, TaskConfig
from amlab.data import TaskBundle, load_idx_images, separable_preset, split, synthetic_bundle
from amlab.defense import DefendedModel, DefenseConfig, fit_sharpening_temperature, train_misinformer
from amlab.errors import ConfigurationError
from amlab.nncore import Classifier, TrainConfig, conv_net, dense_net, train

log = logging.getLogger(__name__)

# offsets keep the three architectures' initial weights distinct
DEFENDER_INIT = 0
MISINFORMER_INIT = 1
CLONE_INIT = 7


def build_bundle(task: TaskConfig, seed: int) -> TaskBundle:
    if task.source == "synthetic":
        spec = separable_preset(task.num_classes, task.input_dim, task.cluster_std, task.samples_per_class, seed)
        return synthetic_bundle(
            spec,
            task.surrogate_shift,
            task.surrogate_scale,
            test_per_class=task.test_per_class,
            seed_pool_per_class=task.seed_pool_per_class,
        )
    return _idx_bundle(task, seed)


def _idx_bundle(task: TaskConfig, seed: int) -> TaskBundle:
    p = task.idx
    for key in ("train_images", "train_labels", "test_images", "test_labels", "surrogate_images"):
        if not getattr(p, key):
            raise ConfigurationError(f"task.idx.{key} is required when task.source is 'idx'")
    k = task.num_classes
    full = load_idx_images(p.train_images, p.train_labels, "defender-train", k, "train")
    train_ds, val = split(full, 0.8, rng_seed=seed)
    test_full = load_idx_images(p.test_images, p.test_labels, "defender-test", k, "test")
    pool, test = split(test_full, p.seed_fraction, rng_seed=seed + 1)
    surrogate = load_idx_images(p.surrogate_images, None, "surrogate", k, "surrogate")
    if p.outlier_images:
        outliers = load_idx_images(p.outlier_images, None, "outlier", k, "outlier")
    else:
        outliers = surrogate.subset(np.arange(0), "no-outliers").with_role("outlier")
    manifest = {
        "train": {"source": p.train_images, "seed": seed, "split": "80%", "size": len(train_ds)},
        "val": {"source": p.train_images, "seed": seed, "split": "20%", "size": len(val)},
        "test": {"source": p.test_images, "seed": seed + 1, "size": len(test)},
        "seed_pool": {"source": p.test_images, "seed": seed + 1, "fraction": p.seed_fraction, "size": len(pool)},
        "surrogate": {"source": p.surrogate_images, "size": len(surrogate)},
        "outliers": {"source": p.outlier_images or None, "size": len(outliers)},
    }
    return TaskBundle(
        train_ds,
        val.with_role("defender-test", "val"),
        test,
        outliers,
        surrogate,
        pool.with_role("seed", "seed_pool"),
        manifest,
    )


def architecture(cfg: ExperimentConfig, input_shape, num_classes: int, init_seed: int) -> Classifier:
    m = cfg.model
    if len(input_shape) == 1:
        return dense_net(input_shape[0], num_classes, hidden=m.hidden, seed=init_seed)
    c, h, w = input_shape
    return conv_net(h, w, num_classes, channels=c, filters=m.filters, kernel=m.kernel, stride=m.stride, seed=init_seed)


def train_defender(cfg: ExperimentConfig, bundle: TaskBundle, seed: int) -> Classifier:
    tc = cfg.defender.train_config(seed)
    model = architecture(cfg, bundle.input_shape, bundle.num_classes, seed + DEFENDER_INIT)
    if tc.oe_weight > 0:
        if len(bundle.outliers) == 0:
            raise ConfigurationError("outlier exposure is enabled but the outlier set is empty")
        trained, _ = train(model, bundle.train, tc, "standard+oe", bundle.outliers)
    else:
        trained, _ = train(model, bundle.train, tc, "standard")
    return trained


def build_misinformer(cfg: ExperimentConfig, bundle: TaskBundle, seed: int) -> Classifier:
    tc = cfg.misinformer.train_config(seed)
    model = architecture(cfg, bundle.input_shape, bundle.num_classes, seed + MISINFORMER_INIT)
    return train_misinformer(bundle.train, tc, model)


@dataclass
class SeedContext:
    """Everything that stays fixed across the knob values of one seed."""

    cfg: ExperimentConfig
    seed: int
    bundle: TaskBundle
    defender: Classifier
    misinformer: Classifier
    temperature: float = 1.0

    @property
    def clone_arch(self) -> Classifier:
        b = self.bundle
        return architecture(self.cfg, b.input_shape, b.num_classes, self.seed + CLONE_INIT)

    @property
    def clone_train(self) -> TrainConfig:
        return self.cfg.clone.train_config(self.seed)

    def defended(self, defense: DefenseConfig) -> DefendedModel:
        return DefendedModel(self.defender, defense, self.misinformer, self.temperature)


def fit_temperature(defender: Classifier, misinformer: Classifier, bundle: TaskBundle) -> float:
    calib = bundle.outliers if len(bundle.outliers) else bundle.surrogate
    return fit_sharpening_temperature(defender, misinformer, bundle.val.inputs, calib.inputs)


@functools.lru_cache(maxsize=8)
def prepare(cfg: ExperimentConfig, seed: int) -> SeedContext:
    """Train the defender and misinformer for one seed (memoised per process)."""
    log.info("preparing seed %d", seed)
    bundle = build_bundle(cfg.task, seed)
    defender = train_defender(cfg, bundle, seed)
    misinformer = build_misinformer(cfg, bundle, seed)
    temperature = fit_temperature(defender, misinformer, bundle) if cfg.defense.match_msp else 1.0
    return SeedContext(cfg, seed, bundle, defender, misinformer, temperature)


def seeds_for(cfg: ExperimentConfig) -> list[int]:
    return [cfg.rng_seed + i for i in range(cfg.sweep.seeds)]


def attack_for_seed(cfg: ExperimentConfig, seed: int, kind: str | None = None):
    return replace(cfg.attack, rng_seed=seed, kind=kind or cfg.attack.kind)
