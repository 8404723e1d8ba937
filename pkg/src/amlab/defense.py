"""Query-time defenses: adaptive misinformation plus two perturbation baselines.

A :class:`DefendedModel` is the only thing an attacker gets to see. Every
query runs the defender ``f``; its maximum softmax probability (MSP) drives
the out-of-distribution flag recorded in the per-user audit trail and, for
``kind="am"``, the reverse-sigmoid weight that mixes in the misinformation
model's output.
"""

from __future__ import annotations

import csv
import enum
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from amlab.errors import ConfigurationError, DimensionError, NotFoundError
from amlab.nncore import Classifier, TrainConfig, dense_net, train
from amlab.nncore.losses import EPS

DEFENSE_KINDS = ("none", "am", "dp", "pp")
SATURATION = 700.0
AUDIT_COLUMNS = ("user_id", "query_index", "msp", "alpha", "flagged")


class Detection(str, enum.Enum):
    ID = "ID"
    OOD = "OOD"


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    tau: float = 0.5
    nu: float = 1000.0
    alpha_pp: float = 0.0
    dp_magnitude: float = 0.0
    match_msp: bool = False

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigurationError(f"defense kind must be one of {DEFENSE_KINDS}, got {self.kind!r}")
        # tau = 0 is accepted: AM then serves f everywhere
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        if not self.nu > 0:
            raise ConfigurationError("nu must be > 0")
        if not 0.0 <= self.alpha_pp <= 1.0:
            raise ConfigurationError("alpha_pp must lie in [0, 1]")
        if self.dp_magnitude < 0:
            raise ConfigurationError("dp_magnitude must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# -- elementwise rules -------------------------------------------------------


def msp(pred) -> float | np.ndarray:
    """Largest entry of a probability vector (row-wise for a batch)."""
    p = np.asarray(pred, dtype=np.float64)
    return p.max(axis=-1) if p.ndim > 1 else float(p.max())


def ood_detect(pred, tau: float) -> Detection:
    return Detection.ID if msp(pred) > tau else Detection.OOD


def blend_coefficient(y_max, tau: float, nu: float = 1000.0):
    """Reverse sigmoid ``1 / (1 + exp(nu * (y_max - tau)))``.

    When ``|nu * (y_max - tau)| > 700`` the result is exactly 0 or 1 instead of
    overflowing; the true value there is below 1e-300 away.
    """
    if not nu > 0:
        raise ConfigurationError("nu must be > 0")
    z = nu * (np.asarray(y_max, dtype=np.float64) - tau)
    safe = np.clip(z, -SATURATION, SATURATION)
    alpha = np.where(z > SATURATION, 0.0, np.where(z < -SATURATION, 1.0, 1.0 / (1.0 + np.exp(safe))))
    return float(alpha) if alpha.ndim == 0 else alpha


def mix(f_out, g_out, alpha):
    """``(1 - alpha) * f + alpha * g``, row-wise alpha for batches."""
    f_out = np.asarray(f_out, dtype=np.float64)
    g_out = np.asarray(g_out, dtype=np.float64)
    if f_out.shape != g_out.shape:
        raise DimensionError(f"cannot mix outputs of shapes {f_out.shape} and {g_out.shape}")
    a = np.asarray(alpha, dtype=np.float64)
    if f_out.ndim > 1 and a.ndim == 1:
        a = a[:, None]
    return (1.0 - a) * f_out + a * g_out


def compute_poison_distribution(pred) -> np.ndarray:
    """One-hot on the least likely class; ties go to the lowest index.

    A stand-in for a gradient-deviation optimiser: the cheapest poison that
    contradicts the model's own ranking as strongly as possible.
    """
    p = np.asarray(pred, dtype=np.float64)
    out = np.zeros_like(p)
    idx = p.argmin(axis=-1)
    if p.ndim == 1:
        out[idx] = 1.0
    else:
        out[np.arange(p.shape[0]), idx] = 1.0
    return out


def deceptive_perturbation(pred, magnitude: float) -> np.ndarray:
    """Flatten the non-top classes toward their own mean, keeping the top class.

    ``magnitude`` (clipped to [0, 1]) is the fraction of the way each non-top
    entry moves to the mean of the non-top mass. The top entry is untouched,
    so normalisation and the argmax are preserved.
    """
    p = np.array(pred, dtype=np.float64)
    squeeze = p.ndim == 1
    p = np.atleast_2d(p)
    beta = min(float(magnitude), 1.0)
    rows = np.arange(p.shape[0])
    top = p.argmax(axis=1)
    k = p.shape[1]
    rest_mass = 1.0 - p[rows, top]
    uniform = (rest_mass / (k - 1))[:, None]
    out = (1.0 - beta) * p + beta * uniform
    out[rows, top] = p[rows, top]
    return out[0] if squeeze else out


def sharpen(pred, temperature: float) -> np.ndarray:
    """``softmax(log p / T)``; T < 1 sharpens, T = 1 is the identity."""
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    z = np.log(np.maximum(p, EPS)) / temperature
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if np.ndim(pred) == 1 else out


# -- training and calibration helpers ----------------------------------------


def train_misinformer(defender_data, cfg: TrainConfig, model: Classifier | None = None) -> Classifier:
    """Train a model to be wrong by minimising the reverse cross-entropy.

    ``model`` supplies the architecture and initialisation; the default is the
    same dense net the defender uses.
    """
    if model is None:
        (dim,) = defender_data.input_shape
        model = dense_net(dim, defender_data.num_classes, seed=cfg.rng_seed + 1)
    trained, _ = train(model, defender_data, cfg, loss_kind="reverse")
    return trained


def fit_sharpening_temperature(defender: Classifier, misinformer: Classifier, id_inputs, calib_inputs) -> float:
    """Temperature that gives misinformation the same median MSP as in-distribution answers.

    ``id_inputs`` are held-out in-distribution samples for ``f``;
    ``calib_inputs`` are the inputs on which ``f_hat`` is expected to answer
    (the defender's outlier set). The median MSP of ``sharpen(f_hat, T)`` is
    monotone in T, so a bisection on log T suffices.
    """
    target = float(np.median(msp(defender.predict_proba(id_inputs))))
    q = misinformer.predict_proba(calib_inputs)
    k = q.shape[1]
    target = min(max(target, 1.0 / k + 1e-9), 1.0 - 1e-9)

    def median_msp(t):
        return float(np.median(msp(sharpen(q, t))))

    lo, hi = np.log(1e-4), np.log(1e2)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if median_msp(np.exp(mid)) > target:
            lo = mid
        else:
            hi = mid
    return float(np.exp(0.5 * (lo + hi)))


def support_overlap(a, b, lower: float = 1.0, upper: float = 99.0) -> float:
    """Share of ``a``'s central percentile range that ``b``'s range also covers.

    Both supports are taken as the ``[lower, upper]`` percentile intervals so
    a few extreme values do not decide the answer.
    """
    a_lo, a_hi = np.percentile(np.asarray(a, dtype=np.float64), [lower, upper])
    b_lo, b_hi = np.percentile(np.asarray(b, dtype=np.float64), [lower, upper])
    width = a_hi - a_lo
    inter = max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))
    if width <= 0:
        return float(b_lo <= a_lo <= b_hi)
    return float(inter / width)


# -- the defended query interface --------------------------------------------


class DefendedModel:
    """A classifier behind one defense policy, with per-user OOD auditing.

    Serving is read-only with respect to the models. The audit counters are
    the only mutable state and are updated under a lock, one query at a time.
    """

    def __init__(
        self,
        defender: Classifier,
        config: DefenseConfig | None = None,
        misinformer: Classifier | None = None,
        misinformer_temperature: float = 1.0,
    ):
        self.defender = defender
        self.config = config or DefenseConfig()
        self.misinformer = misinformer
        self.misinformer_temperature = float(misinformer_temperature)
        if self.config.kind == "am":
            if misinformer is None:
                raise ConfigurationError("the AM defense needs a misinformation model")
            if misinformer.num_classes != defender.num_classes:
                raise ConfigurationError("defender and misinformer disagree on the number of classes")
        self._lock = threading.Lock()
        self._totals: dict[str, int] = {}
        self._flagged: dict[str, int] = {}
        self._log: list[tuple] = []

    @property
    def num_classes(self) -> int:
        return self.defender.num_classes

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.defender.input_shape

    def with_config(self, config: DefenseConfig) -> "DefendedModel":
        """Same models and temperature under another policy, with a fresh audit trail."""
        return DefendedModel(self.defender, config, self.misinformer, self.misinformer_temperature)

    def misinformation(self, X) -> np.ndarray:
        q = self.misinformer.predict_proba(X)
        if self.config.match_msp and self.misinformer_temperature != 1.0:
            q = sharpen(q, self.misinformer_temperature)
        return q

    def respond(self, X):
        """Serve a batch without auditing: ``(y_served, y_true, msp, weight)``.

        ``weight`` is the blend weight actually applied: alpha for AM,
        alpha_pp for PP, zero otherwise.
        """
        cfg = self.config
        y = self.defender.predict_proba(X)
        y_max = y.max(axis=1)
        n = y.shape[0]
        if cfg.kind == "am":
            alpha = blend_coefficient(y_max, cfg.tau, cfg.nu)
            alpha = np.broadcast_to(alpha, (n,))
            served = mix(y, self.misinformation(X), alpha)
        elif cfg.kind == "pp":
            alpha = np.full(n, cfg.alpha_pp)
            served = mix(y, compute_poison_distribution(y), alpha)
        elif cfg.kind == "dp":
            alpha = np.zeros(n)
            served = deceptive_perturbation(y, cfg.dp_magnitude)
        else:
            alpha = np.zeros(n)
            served = y
        return served, y, y_max, alpha

    def query_batch(self, X, user_id: str = "anonymous") -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        served, _, y_max, alpha = self.respond(X)
        flagged = y_max <= self.config.tau
        with self._lock:
            start = self._totals.get(user_id, 0)
            for i in range(served.shape[0]):
                self._log.append((user_id, start + i, float(y_max[i]), float(alpha[i]), bool(flagged[i])))
            self._totals[user_id] = start + served.shape[0]
            self._flagged[user_id] = self._flagged.get(user_id, 0) + int(flagged.sum())
        return served

    def query(self, x, user_id: str = "anonymous") -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise DimensionError(f"expected an input of shape {self.input_shape}, got {x.shape}")
        return self.query_batch(x[None], user_id)[0]

    def query_count(self, user_id: str | None = None) -> int:
        with self._lock:
            if user_id is None:
                return sum(self._totals.values())
            return self._totals.get(user_id, 0)

    def audit_user(self, user_id: str) -> float:
        """Fraction of this user's queries that the detector flagged as OOD."""
        with self._lock:
            total = self._totals.get(user_id, 0)
            if total == 0:
                raise NotFoundError(f"no queries recorded for user {user_id!r}")
            return self._flagged[user_id] / total

    def write_audit_log(self, path) -> Path:
        """Append the audit records to a CSV (header written once)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or path.stat().st_size == 0
        with self._lock:
            rows = list(self._log)
        with path.open("a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fresh:
                w.writerow(AUDIT_COLUMNS)
            for user, idx, m, a, flag in rows:
                w.writerow([user, idx, repr(m), repr(a), int(flag)])
        return path


def audit_user(dm: DefendedModel, user_id: str) -> float:
    return dm.audit_user(user_id)


def am_query(dm: DefendedModel, x) -> np.ndarray:
    if dm.config.kind != "am" or dm.misinformer is None:
        raise ConfigurationError("am_query needs an AM-configured model with a misinformer")
    return dm.query(x)


def dp_query(dm: DefendedModel, x) -> np.ndarray:
    if dm.config.kind != "dp":
        raise ConfigurationError("dp_query needs kind='dp'")
    return dm.query(x)


def pp_query(dm: DefendedModel, x) -> np.ndarray:
    if dm.config.kind != "pp":
        raise ConfigurationError("pp_query needs kind='pp'")
    return dm.query(x)
