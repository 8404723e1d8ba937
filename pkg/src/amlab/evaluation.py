"""Metrics, CDFs, trade-off sweeps and report files.

Report files written by :func:`emit_report`:

``tradeoff.csv``
    ``knob_name,knob_value,defender_acc,clone_acc,attack,strategy,seed``;
    one row per (knob value, seed) plus a mean row per knob value with
    ``seed = -1``. Floats are written with ``repr`` so they parse back
    exactly.
``cdf.csv``
    ``value,cum_fraction,label`` for every CDF series.
``tradeoff_<knob>_<attack>_<strategy>.svg`` and ``cdf_<group>.svg``
    Static line charts with a fixed canvas; the CDF group is the part of
    the series label before the first ``:``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from amlab.attacks import AttackConfig, run_attack
from amlab.config import ExperimentConfig
from amlab.defense import DefendedModel, DefenseConfig, blend_coefficient, mix, msp
from amlab.errors import AmlabError, ConfigurationError, DimensionError
from amlab.nncore import Classifier
from amlab.pipeline import SeedContext, prepare, seeds_for

log = logging.getLogger(__name__)

TRADEOFF_COLUMNS = ("knob_name", "knob_value", "defender_acc", "clone_acc", "attack", "strategy", "seed")
CDF_COLUMNS = ("value", "cum_fraction", "label")
KNOBS = {"am": "tau", "pp": "alpha_pp", "dp": "dp_magnitude"}
MEAN_SEED = -1


# -- metrics -----------------------------------------------------------------


def predict_proba(predictor, X) -> np.ndarray:
    """Probabilities from a Classifier, the served output of a DefendedModel, or a callable."""
    if isinstance(predictor, DefendedModel):
        return predictor.respond(X)[0]
    if isinstance(predictor, Classifier):
        return predictor.predict_proba(X)
    return np.asarray(predictor(X), dtype=np.float64)


def accuracy(predictor, test) -> float:
    """Fraction of argmax-correct predictions.

    A DefendedModel is scored on what it serves, so AM accuracy includes the
    misinformation blended into low-confidence answers.
    """
    if len(test.inputs) == 0:
        raise ConfigurationError("accuracy needs a non-empty test set")
    probs = predict_proba(predictor, test.inputs)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(test.labels)))


def hellinger(p, q):
    """``sqrt(sum((sqrt p - sqrt q)^2) / 2)``; rows of 2-D inputs are paired up."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"hellinger needs equal shapes, got {p.shape} and {q.shape}")
    d = np.sqrt(np.clip(p, 0, None)) - np.sqrt(np.clip(q, 0, None))
    h = np.sqrt(0.5 * np.sum(d * d, axis=-1))
    h = np.minimum(h, 1.0)
    return float(h) if h.ndim == 0 else h


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ConfigurationError("ks_statistic needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


# -- CDFs --------------------------------------------------------------------


@dataclass(eq=False)
class CdfSeries:
    values: np.ndarray
    fractions: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        if self.values.shape != self.fractions.shape or self.values.ndim != 1 or self.values.size == 0:
            raise DimensionError("a CDF needs matching non-empty 1-D values and fractions")
        if np.any(np.diff(self.values) < 0) or np.any(np.diff(self.fractions) < 0):
            raise ConfigurationError("CDF values and fractions must be non-decreasing")
        if self.fractions[-1] != 1.0 or self.fractions[0] < 0:
            raise ConfigurationError("CDF fractions must lie in [0, 1] and end at 1")

    @classmethod
    def from_samples(cls, samples, label: str = "") -> "CdfSeries":
        v = np.sort(np.asarray(samples, dtype=np.float64).ravel())
        if v.size == 0:
            raise ConfigurationError("cannot build a CDF from zero samples")
        return cls(v, np.arange(1, v.size + 1) / v.size, label)

    def __len__(self) -> int:
        return self.values.size

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    def at(self, x) -> np.ndarray:
        """Empirical ``P(X <= x)``."""
        idx = np.searchsorted(self.values, x, side="right")
        return np.where(idx == 0, 0.0, self.fractions[np.maximum(idx - 1, 0)])


def msp_cdf(model, queries, label: str = "msp") -> CdfSeries:
    """CDF of the raw defender's MSP over ``queries`` (the detector's view)."""
    raw = model.defender if isinstance(model, DefendedModel) else model
    X = getattr(queries, "inputs", queries)
    if len(X) == 0:
        raise ConfigurationError("msp_cdf needs at least one query")
    return CdfSeries.from_samples(msp(predict_proba(raw, X)), label)


def hellinger_cdf(defended: DefendedModel, reference: Classifier, queries, label: str = "hellinger") -> CdfSeries:
    """CDF of ``H(f(x), y')`` between the reference model and what the defense serves."""
    X = getattr(queries, "inputs", queries)
    served = defended.respond(X)[0]
    return CdfSeries.from_samples(hellinger(reference.predict_proba(X), served), label)


# -- threshold calibration ---------------------------------------------------


def tau_for_acceptance(model, data, rate: float = 0.95) -> float:
    """Largest tau that still accepts at least ``rate`` of ``data`` as in-distribution."""
    if not 0 < rate <= 1:
        raise ConfigurationError("acceptance rate must lie in (0, 1]")
    raw = model.defender if isinstance(model, DefendedModel) else model
    s = np.sort(msp(predict_proba(raw, getattr(data, "inputs", data))))
    n = s.size
    keep = math.ceil(rate * n - 1e-9)
    if keep >= n:
        return float(np.nextafter(s[0], 0.0))
    return float(np.nextafter(s[n - keep], 0.0))


def calibrate_tau(defended: DefendedModel, data, max_drop: float = 0.01, grid=None) -> float:
    """Largest tau whose accuracy on ``data`` through AM is within ``max_drop`` of the raw defender."""
    X = data.inputs
    labels = np.asarray(data.labels)
    y = defended.defender.predict_proba(X)
    q = defended.misinformation(X)
    y_max = y.max(axis=1)
    base = float(np.mean(y.argmax(axis=1) == labels))
    grid = np.linspace(0.0, 1.0, 1001) if grid is None else np.asarray(grid, dtype=np.float64)
    best = 0.0
    for t in grid:
        served = mix(y, q, blend_coefficient(y_max, float(t), defended.config.nu))
        if np.mean(served.argmax(axis=1) == labels) >= base - max_drop - 1e-12:
            best = max(best, float(t))
    return best


def match_knob(evaluate, target: float, lo: float, hi: float, tol: float = 0.005, iters: int = 40):
    """Bisect a knob whose ``evaluate(knob)`` accuracy falls as the knob grows.

    Returns ``(knob, accuracy, matched)``; when no knob within ``[lo, hi]``
    lands within ``tol`` of ``target`` the closest one seen is returned with
    ``matched=False``.
    """
    best = None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        acc = evaluate(mid)
        if best is None or abs(acc - target) < abs(best[1] - target):
            best = (mid, acc)
        if abs(acc - target) <= tol:
            return mid, acc, True
        if acc > target:
            lo = mid
        else:
            hi = mid
    return best[0], best[1], False


# -- trade-off sweeps --------------------------------------------------------


@dataclass(frozen=True)
class TradeoffPoint:
    knob_name: str
    knob_value: float
    defender_accuracy: float
    clone_accuracy: float
    attack_kind: str
    label_strategy: str
    seed: int = MEAN_SEED
    below_floor: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.knob_name not in KNOBS.values():
            raise ConfigurationError(f"knob_name must be one of {tuple(KNOBS.values())}")
        for name in ("defender_accuracy", "clone_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")

    @property
    def is_mean(self) -> bool:
        return self.seed == MEAN_SEED


class SweepAborted(AmlabError, RuntimeError):
    """A sweep cycle failed; ``points`` holds what finished before it."""

    def __init__(self, message: str, points):
        super().__init__(message)
        self.points = list(points)


def defense_for(kind: str, knob: float, base: DefenseConfig | None = None) -> DefenseConfig:
    base = base or DefenseConfig()
    if kind not in KNOBS:
        raise ConfigurationError(f"cannot sweep defense kind {kind!r}")
    return replace(base, kind=kind, **{KNOBS[kind]: float(knob)})


def run_point(ctx: SeedContext, defense: DefenseConfig, attack: AttackConfig):
    """One train-attack-evaluate cycle: ``(defender_acc, clone_acc)`` on defender-test."""
    dm = ctx.defended(defense)
    b = ctx.bundle
    defender_acc = accuracy(dm, b.test)
    clone, _ = run_attack(dm, attack, ctx.clone_arch, ctx.clone_train, b.surrogate, b.seed_pool)
    return defender_acc, accuracy(clone, b.test)


def _seed_points(cfg, seed, kind, knobs, attack, floor):
    ctx = prepare(cfg, seed)
    attack = replace(attack, rng_seed=seed)
    out = []
    for knob in knobs:
        d, c = run_point(ctx, defense_for(kind, knob, cfg.defense), attack)
        below = floor is not None and d < floor
        out.append(TradeoffPoint(KNOBS[kind], float(knob), d, c, attack.kind, attack.label_strategy, seed, below))
        log.info("%s=%g seed %d: defender %.3f clone %.3f", KNOBS[kind], knob, seed, d, c)
    return out


def _validate_knobs(kind: str, knobs) -> list[float]:
    knobs = [float(k) for k in knobs]
    if not knobs:
        raise ConfigurationError("the knob grid is empty")
    for k in knobs:
        defense_for(kind, k)  # raises on out-of-domain values
    return knobs


def mean_points(points, floor: float | None = None) -> list[TradeoffPoint]:
    """Average per-seed points that share a knob value, attack and strategy."""
    groups: dict[tuple, list[TradeoffPoint]] = {}
    for p in points:
        if not p.is_mean:
            groups.setdefault((p.knob_name, p.knob_value, p.attack_kind, p.label_strategy), []).append(p)
    out = []
    for (name, value, attack, strategy), ps in groups.items():
        d = sum(p.defender_accuracy for p in ps) / len(ps)
        c = sum(p.clone_accuracy for p in ps) / len(ps)
        below = floor is not None and d < floor
        out.append(TradeoffPoint(name, value, d, c, attack, strategy, MEAN_SEED, below))
    return out


def sweep(
    defense_kind: str,
    knob_values,
    attack: AttackConfig,
    cfg: ExperimentConfig,
    accuracy_floor: float | None = None,
    seeds=None,
    workers: int = 1,
    partial_path=None,
) -> list[TradeoffPoint]:
    """Trade-off points for one defense and attack, per seed and averaged.

    Each seed trains its own defender and misinformer once and reuses them
    for every knob value. Seeds are independent and run in separate
    processes when ``workers > 1``; results are assembled in seed order, so
    the output does not depend on scheduling. Points whose defender
    accuracy is below ``accuracy_floor`` are flagged, not dropped. If a cycle
    fails, the completed points are written to ``partial_path`` (when given)
    and :class:`SweepAborted` is raised.
    """
    knobs = _validate_knobs(defense_kind, knob_values)
    seeds = list(seeds_for(cfg) if seeds is None else seeds)
    if not seeds:
        raise ConfigurationError("a sweep needs at least one seed")
    done: list[TradeoffPoint] = []
    args = [(cfg, s, defense_kind, knobs, attack, accuracy_floor) for s in seeds]
    try:
        if workers > 1 and len(seeds) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
                futures = [pool.submit(_seed_points, *a) for a in args]
                for fut in futures:
                    done.extend(fut.result())
        else:
            for a in args:
                done.extend(_seed_points(*a))
    except Exception as exc:
        if partial_path is not None and done:
            write_tradeoff_csv(done, partial_path)
        raise SweepAborted(f"sweep aborted after {len(done)} points: {exc}", done) from exc
    return done + mean_points(done, accuracy_floor)


def dominating_points(am_points, pp_points, tol: float = 0.005):
    """AM points beaten by a PP point at matched defender accuracy.

    A PP point dominates an AM point when its defender accuracy is no more
    than ``tol`` below the AM point's and its clone accuracy is strictly
    lower. Returns ``(am_point, pp_point)`` pairs.
    """
    pairs = []
    for a in am_points:
        for p in pp_points:
            if p.defender_accuracy >= a.defender_accuracy - tol and p.clone_accuracy < a.clone_accuracy:
                pairs.append((a, p))
    return pairs


# -- report files ------------------------------------------------------------


def _tradeoff_rows(points):
    for p in points:
        yield (
            p.knob_name,
            repr(float(p.knob_value)),
            repr(float(p.defender_accuracy)),
            repr(float(p.clone_accuracy)),
            p.attack_kind,
            p.label_strategy,
            str(int(p.seed)),
        )


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_tradeoff_csv(points, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv_text(TRADEOFF_COLUMNS, _tradeoff_rows(points)))
    return path


def read_tradeoff_csv(path) -> list[TradeoffPoint]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != TRADEOFF_COLUMNS:
            raise ConfigurationError(f"{path}: unexpected header {','.join(header)!r}")
        return [
            TradeoffPoint(name, float(k), float(d), float(c), attack, strategy, int(seed))
            for name, k, d, c, attack, strategy, seed in reader
        ]


def write_cdf_csv(cdfs, path) -> Path:
    rows = []
    for s in cdfs:
        rows.extend((repr(float(v)), repr(float(f)), s.label) for v, f in zip(s.values, s.fractions))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv_text(CDF_COLUMNS, rows))
    return path


def read_cdf_csv(path) -> list[CdfSeries]:
    series: dict[str, tuple[list, list]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CDF_COLUMNS:
            raise ConfigurationError(f"{path}: unexpected header {','.join(header)!r}")
        for v, f, label in reader:
            vs, fs = series.setdefault(label, ([], []))
            vs.append(float(v))
            fs.append(float(f))
    return [CdfSeries(vs, fs, label) for label, (vs, fs) in series.items()]


def _save_svg(draw, path: Path, xlabel: str, ylabel: str, title: str) -> Path:
    import matplotlib
    from matplotlib.backends.backend_svg import FigureCanvasSVG
    from matplotlib.figure import Figure

    with matplotlib.rc_context({"svg.hashsalt": "amlab", "svg.fonttype": "none"}):
        fig = Figure(figsize=(6.0, 4.5), dpi=72)
        FigureCanvasSVG(fig)
        ax = fig.add_subplot(1, 1, 1)
        draw(ax)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best", fontsize="small")
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _safe(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "-" for ch in text)


def emit_report(points, cdfs, out_dir) -> list[Path]:
    """Write the CSVs and one SVG per trade-off curve and per CDF group."""
    points = list(points)
    cdfs = list(cdfs or [])
    if not points and not cdfs:
        raise ConfigurationError("nothing to report: no trade-off points and no CDFs")
    out = Path(out_dir)
    written = []
    if points:
        written.append(write_tradeoff_csv(points, out / "tradeoff.csv"))
        curves: dict[tuple, list[TradeoffPoint]] = {}
        for p in points:
            curves.setdefault((p.knob_name, p.attack_kind, p.label_strategy), []).append(p)
        for (knob, attack, strategy), ps in curves.items():
            means = [p for p in ps if p.is_mean] or ps
            means = sorted(means, key=lambda p: (p.knob_value, p.seed))

            def draw(ax, means=means, knob=knob):
                xs = [p.defender_accuracy for p in means]
                ys = [p.clone_accuracy for p in means]
                ax.plot(xs, ys, marker="o", label=knob)
                for p in means:
                    ax.annotate(f"{p.knob_value:g}", (p.defender_accuracy, p.clone_accuracy), fontsize=7)

            name = f"tradeoff_{_safe(knob)}_{_safe(attack)}_{_safe(strategy)}.svg"
            written.append(_save_svg(draw, out / name, "defender accuracy", "clone accuracy", f"{knob} vs {attack}"))
    if cdfs:
        written.append(write_cdf_csv(cdfs, out / "cdf.csv"))
        groups: dict[str, list[CdfSeries]] = {}
        for s in cdfs:
            groups.setdefault(s.label.split(":", 1)[0], []).append(s)
        for group, series in groups.items():

            def draw(ax, series=series):
                for s in series:
                    ax.step(s.values, s.fractions, where="post", label=s.label)

            written.append(_save_svg(draw, out / f"cdf_{_safe(group)}.svg", group, "cumulative fraction", f"CDF of {group}"))
    return written
