"""Model extraction: KnockoffNets-style surrogate querying and JBDA.

Attacks never touch the victim's parameters. A victim is anything with a
``query_batch(X, user_id=...)`` method returning probability rows, which is
what :class:`amlab.defense.DefendedModel` exposes; plain callables
``X -> probs`` are accepted too.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from amlab.errors import ConfigurationError
from amlab.nncore import Classifier, LayerSpec, TrainConfig, input_gradient, train

log = logging.getLogger(__name__)

ATTACK_KINDS = ("knockoff", "jbda")
LABEL_STRATEGIES = ("soft", "argmax")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "knockoff"
    query_budget: int = 500
    surrogate: str = "surrogate"
    seed_size: int = 20
    rounds: int = 4
    jbda_step: float = 0.1
    clone_epochs_per_round: int = 10
    label_strategy: str = "soft"
    rng_seed: int = 0
    restart_each_round: bool = False
    query_cap: int | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.label_strategy not in LABEL_STRATEGIES:
            raise ConfigurationError(f"label_strategy must be one of {LABEL_STRATEGIES}")
        if self.query_budget < 1 or self.seed_size < 1 or self.clone_epochs_per_round < 1:
            raise ConfigurationError("query_budget, seed_size and clone_epochs_per_round must be >= 1")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if not self.jbda_step > 0:
            raise ConfigurationError("jbda_step must be > 0")
        if self.query_cap is not None and self.query_cap < 1:
            raise ConfigurationError("query_cap must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HarvestedDataset:
    """Inputs the attacker sent and the probability vectors it got back."""

    inputs: np.ndarray
    targets: np.ndarray
    source_attack: dict = field(default_factory=dict)
    halted: bool = False

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ConfigurationError("harvest inputs and targets differ in length")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self.targets.argmax(axis=1)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]


class QueryCounter:
    """Wraps a victim and counts every row sent to it."""

    def __init__(self, victim, user_id: str = "attacker"):
        self.victim = victim
        self.user_id = user_id
        self.count = 0

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if hasattr(self.victim, "query_batch"):
            out = self.victim.query_batch(X, user_id=self.user_id)
        else:
            out = self.victim(X)
        self.count += X.shape[0]
        return np.asarray(out, dtype=np.float64)


def _clone_from(arch) -> Classifier:
    if isinstance(arch, Classifier):
        return arch.copy()
    return Classifier([a if isinstance(a, LayerSpec) else LayerSpec.from_dict(a) for a in arch])


def knockoff_harvest(victim, surrogate, budget: int, rng_seed: int = 0, user_id: str = "attacker") -> HarvestedDataset:
    """Query the victim with ``budget`` surrogate inputs.

    Sampling is without replacement while the surrogate lasts; any remainder
    is drawn with replacement.
    """
    n = len(surrogate.inputs)
    if n == 0:
        raise ConfigurationError("the surrogate dataset is empty")
    if budget < 1:
        raise ConfigurationError("budget must be >= 1")
    rng = np.random.default_rng([rng_seed, 23])
    if budget <= n:
        idx = rng.choice(n, size=budget, replace=False)
    else:
        idx = np.concatenate([rng.permutation(n), rng.integers(0, n, size=budget - n)])
    oracle = QueryCounter(victim, user_id)
    X = np.asarray(surrogate.inputs)[idx]
    Y = oracle(X)
    source = {"kind": "knockoff", "budget": budget, "rng_seed": rng_seed, "surrogate": getattr(surrogate, "name", "")}
    return HarvestedDataset(X, Y, source)


def train_clone(harvest: HarvestedDataset, arch, cfg: TrainConfig, label_strategy: str = "soft") -> Classifier:
    """Distil the harvest into a fresh model built from ``arch``.

    ``soft`` fits the served probability vectors; ``argmax`` fits their top
    class with ordinary cross-entropy.
    """
    if len(harvest) == 0:
        raise ConfigurationError("cannot train a clone on an empty harvest")
    if label_strategy not in LABEL_STRATEGIES:
        raise ConfigurationError(f"label_strategy must be one of {LABEL_STRATEGIES}")
    kind = "distill" if label_strategy == "soft" else "standard"
    clone, _ = train(_clone_from(arch), harvest, cfg, loss_kind=kind)
    return clone


def jbda_synthesize(clone: Classifier, x, label, step: float) -> np.ndarray:
    """``x + step * sign(d CE(clone(x), label) / dx)`` for one input or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == clone.input_shape
    X = x[None] if single else x
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    grad = input_gradient(clone, X, labels)
    out = X + step * np.sign(grad)
    return out[0] if single else out


def jbda_attack(victim, seed, cfg: AttackConfig, arch, train_cfg: TrainConfig, user_id: str = "attacker"):
    """Jacobian-based dataset augmentation.

    Takes ``cfg.seed_size`` examples from the ``seed`` pool, labels them via
    the victim and trains the clone. Each round then perturbs every example
    collected so far, labels the new points via the victim, and trains again,
    so the dataset doubles per round. The clone's parameters carry over
    between rounds unless ``restart_each_round`` is set. Returns
    ``(clone, harvest)``; if ``query_cap`` cuts a round short the harvest is
    marked ``halted``.
    """
    n_pool = len(seed.inputs)
    if n_pool < cfg.seed_size:
        raise ConfigurationError(f"seed pool has {n_pool} examples, need {cfg.seed_size}")
    rng = np.random.default_rng([cfg.rng_seed, 29])
    pick = rng.choice(n_pool, size=cfg.seed_size, replace=False)
    oracle = QueryCounter(victim, user_id)
    cap = cfg.query_cap

    X = np.asarray(seed.inputs)[pick]
    if cap is not None:
        X = X[:cap]
    Y = oracle(X)
    halted = cap is not None and X.shape[0] < cfg.seed_size

    def fit(model, X, Y, r):
        round_cfg = replace(train_cfg, epochs=cfg.clone_epochs_per_round, rng_seed=train_cfg.rng_seed + r)
        h = HarvestedDataset(X, Y)
        return train_clone(h, model, round_cfg, cfg.label_strategy)

    clone = fit(_clone_from(arch), X, Y, 0)
    for r in range(1, cfg.rounds + 1):
        if halted:
            break
        new_X = jbda_synthesize(clone, X, Y.argmax(axis=1), cfg.jbda_step)
        if cap is not None and oracle.count + new_X.shape[0] > cap:
            new_X = new_X[: cap - oracle.count]
            halted = True
            if new_X.shape[0] == 0:
                break
        new_Y = oracle(new_X)
        X = np.concatenate([X, new_X])
        Y = np.concatenate([Y, new_Y])
        start = _clone_from(arch) if cfg.restart_each_round else clone
        clone = fit(start, X, Y, r)
        log.debug("jbda round %d: %d examples", r, X.shape[0])
    source = cfg.to_dict()
    source["queries"] = oracle.count
    return clone, HarvestedDataset(X, Y, source, halted=halted)


def knockoff_attack(victim, surrogate, cfg: AttackConfig, arch, train_cfg: TrainConfig, user_id: str = "attacker"):
    """Harvest ``query_budget`` surrogate answers and train a clone on them."""
    harvest = knockoff_harvest(victim, surrogate, cfg.query_budget, cfg.rng_seed, user_id)
    harvest.source_attack.update(cfg.to_dict())
    clone = train_clone(harvest, arch, train_cfg, cfg.label_strategy)
    return clone, harvest


def run_attack(victim, cfg: AttackConfig, arch, train_cfg: TrainConfig, surrogate=None, seed_pool=None):
    if cfg.kind == "knockoff":
        if surrogate is None:
            raise ConfigurationError("knockoff needs a surrogate dataset")
        return knockoff_attack(victim, surrogate, cfg, arch, train_cfg)
    if seed_pool is None:
        raise ConfigurationError("jbda needs a seed pool")
    return jbda_attack(victim, seed_pool, cfg, arch, train_cfg)
