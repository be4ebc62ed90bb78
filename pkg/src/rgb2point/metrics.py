"""Point cloud distances (Chamfer, EMD, F-score) and per-category reporting statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import CardinalityMismatchError, SolverInfeasibleError
from .pointcloud import PointCloud

METRIC_KINDS = ("chamfer", "emd", "fscore")
LOWER_IS_BETTER = {"chamfer": True, "emd": True, "fscore": False}
DISPLAY_SCALE = {"chamfer": 100.0, "emd": 100.0, "fscore": 1.0}
DISPLAY_NAME = {"chamfer": "CD(x10^2)", "emd": "EMD(x10^2)", "fscore": "F-score"}

EXACT_EMD_LIMIT = 1024
DEFAULT_FSCORE_TAU = 0.01


@dataclass(frozen=True)
class MetricValue:
    kind: str
    value: float
    scale_hint: Optional[float] = None

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.value < 0 or (self.kind == "fscore" and self.value > 1):
            raise ValueError(f"{self.kind} value out of range: {self.value}")

    def __float__(self):
        return float(self.value)

    @property
    def scaled(self) -> float:
        return self.value * (self.scale_hint or 1.0)


def _pts(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else PointCloud(cloud).points


def _cloud(cloud) -> PointCloud:
    return cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)


# --------------------------------------------------------------------------
# Chamfer


def directional_distances(src: PointCloud, dst: PointCloud) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest neighbor in ``dst``."""
    _, d = _cloud(dst).index.query_many(_pts(src), resolve_ties=False)
    return d


def chamfer_distance(G, R) -> MetricValue:
    """Symmetric Chamfer distance with unsquared norms.

    Each direction is averaged over its own cloud and weighted by one half,
    so clouds of different sizes are handled.
    """
    G, R = _cloud(G), _cloud(R)
    value = 0.5 * directional_distances(G, R).mean() + 0.5 * directional_distances(R, G).mean()
    return MetricValue("chamfer", float(value), DISPLAY_SCALE["chamfer"])


def chamfer_bruteforce(G, R) -> float:
    """All-pairs O(|G||R|) Chamfer distance, the reference for :func:`chamfer_distance`."""
    g, r = _pts(G), _pts(R)
    d = np.sqrt(((g[:, None, :] - r[None, :, :]) ** 2).sum(axis=-1))
    return float(0.5 * d.min(axis=1).mean() + 0.5 * d.min(axis=0).mean())


# --------------------------------------------------------------------------
# Earth Mover's distance


def emd(
    G,
    R,
    solver: str = "auto",
    *,
    epsilon: float = 1e-3,
    max_iter: int = 500,
    exact_limit: int = EXACT_EMD_LIMIT,
) -> MetricValue:
    """Earth Mover's distance between equal-size clouds: optimal matching cost / n.

    ``solver`` is ``"exact-assignment"``, ``"regularized-transport"`` or
    ``"auto"`` (exact up to ``exact_limit`` points, regularized above).
    """
    g, r = _pts(G), _pts(R)
    if len(g) != len(r):
        raise CardinalityMismatchError(f"EMD needs equal cardinalities, got {len(g)} and {len(r)}")
    n = len(g)
    if solver == "auto":
        solver = "exact-assignment" if n <= exact_limit else "regularized-transport"
    if solver == "exact-assignment":
        if n > exact_limit:
            raise SolverInfeasibleError(
                f"exact assignment limited to {exact_limit} points, got {n}; use regularized-transport"
            )
        value = exact_assignment_cost(g, r)[0] / n
    elif solver == "regularized-transport":
        value = sinkhorn_transport_cost(cdist(g, r), epsilon=epsilon, max_iter=max_iter)
    else:
        raise ValueError(f"unknown EMD solver {solver!r}")
    return MetricValue("emd", float(value), DISPLAY_SCALE["emd"])


def exact_assignment_cost(g: np.ndarray, r: np.ndarray):
    """Minimum-cost perfect matching under Euclidean cost; returns (total cost, column assignment)."""
    cost = cdist(np.asarray(g, dtype=np.float64), np.asarray(r, dtype=np.float64))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()), cols


def sinkhorn_transport_cost(cost: np.ndarray, epsilon: float = 1e-3, max_iter: int = 500) -> float:
    """Entropic optimal transport between uniform marginals, rounded to a feasible solution.

    Runs log-domain Sinkhorn with epsilon annealed geometrically from the cost
    scale down to ``epsilon`` inside the ``max_iter`` budget. The entropic plan
    is then turned into two feasible solutions: its projection onto the
    transport polytope and a greedy one-to-one matching read off the plan.
    The cheaper one is returned. Both are feasible, so the value never falls
    below the exact optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))
    f = np.zeros(n)
    g = np.zeros(m)

    schedule = _epsilon_schedule(float(cost.max()), epsilon, max_iter)
    for eps in schedule:
        f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
    plan = np.exp((f[:, None] + g[None, :] - cost) / schedule[-1])
    best = float((round_to_feasible(plan, np.exp(log_a), np.exp(log_b)) * cost).sum())
    if n == m:
        perm = greedy_matching(plan)
        best = min(best, float(cost[np.arange(n), perm].mean()))
    return best


def _epsilon_schedule(scale: float, target: float, max_iter: int, factor: float = 0.7) -> List[float]:
    start = max(scale, target)
    stages = max(int(math.ceil(math.log(start / target) / math.log(1.0 / factor))), 0) + 1
    per_stage = max(max_iter // stages, 1)
    schedule = []
    for k in range(stages):
        schedule += [max(target, start * factor ** k)] * per_stage
    schedule = schedule[:max_iter]
    return schedule + [target] * (max_iter - len(schedule))


def greedy_matching(plan: np.ndarray) -> np.ndarray:
    """Greedy one-to-one matching by descending plan mass; returns column index per row."""
    n = plan.shape[0]
    flat = plan.ravel()
    perm = np.full(n, -1, dtype=np.intp)
    col_used = np.zeros(n, dtype=bool)
    assigned = 0
    k = min(flat.size, 8 * n)
    while True:
        top = np.argpartition(-flat, k - 1)[:k] if k < flat.size else np.arange(flat.size)
        top = top[np.argsort(-flat[top], kind="stable")]
        for idx in top:
            i, j = divmod(int(idx), n)
            if perm[i] < 0 and not col_used[j]:
                perm[i] = j
                col_used[j] = True
                assigned += 1
                if assigned == n:
                    return perm
        if k >= flat.size:
            break
        k = min(flat.size, 4 * k)
        perm[:] = -1
        col_used[:] = False
        assigned = 0
    # unreachable for square plans, kept for safety
    free_cols = iter(np.flatnonzero(~col_used))
    for i in np.flatnonzero(perm < 0):
        perm[i] = next(free_cols)
    return perm


def round_to_feasible(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a nonnegative plan onto {P >= 0 : P1 = a, P^T 1 = b} (Altschuler et al. rounding)."""
    plan = np.asarray(plan, dtype=np.float64)
    row = plan.sum(axis=1)
    plan = plan * np.minimum(a / np.maximum(row, 1e-300), 1.0)[:, None]
    col = plan.sum(axis=0)
    plan = plan * np.minimum(b / np.maximum(col, 1e-300), 1.0)[None, :]
    err_r = a - plan.sum(axis=1)
    err_c = b - plan.sum(axis=0)
    mass = err_r.sum()
    if mass > 0:
        plan = plan + np.outer(err_r, err_c) / mass
    return plan


# --------------------------------------------------------------------------
# F-score


def precision_recall(G, R, tau: float = DEFAULT_FSCORE_TAU):
    if not tau > 0:
        raise ValueError(f"F-score threshold must be positive, got {tau}")
    G, R = _cloud(G), _cloud(R)
    precision = float((directional_distances(R, G) < tau).mean())
    recall = float((directional_distances(G, R) < tau).mean())
    return precision, recall


def fscore(G, R, tau: float = DEFAULT_FSCORE_TAU) -> MetricValue:
    """Harmonic mean of precision (R near G) and recall (G near R) at threshold ``tau``."""
    p, r = precision_recall(G, R, tau)
    value = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return MetricValue("fscore", value)


def evaluate_pair(G, R, metrics: Iterable[str] = METRIC_KINDS, tau: float = DEFAULT_FSCORE_TAU, **emd_kwargs) -> Dict[str, float]:
    out = {}
    for kind in metrics:
        if kind == "chamfer":
            out[kind] = chamfer_distance(G, R).value
        elif kind == "emd":
            out[kind] = emd(G, R, **emd_kwargs).value
        elif kind == "fscore":
            out[kind] = fscore(G, R, tau).value
        else:
            raise ValueError(f"unknown metric {kind!r}")
    return out


# --------------------------------------------------------------------------
# reporting


@dataclass
class SampleMetrics:
    sample_id: str
    category: str
    values: Dict[str, float]


@dataclass
class MetricReport:
    per_sample: List[SampleMetrics]
    per_category: Dict[str, Dict[str, float]]  # metric -> category -> mean
    aggregate: Dict[str, float]  # metric -> mean of category means
    stability: Dict[str, float]  # metric -> sample stdev of category means
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def metrics(self) -> List[str]:
        return list(self.aggregate)

    @property
    def categories(self) -> List[str]:
        first = next(iter(self.per_category.values()), {})
        return list(first)

    def to_dict(self) -> dict:
        return {
            "per_sample": [
                {"sample_id": s.sample_id, "category": s.category, "values": s.values}
                for s in self.per_sample
            ],
            "per_category": self.per_category,
            "aggregate": self.aggregate,
            "stability": self.stability,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls(
            per_sample=[SampleMetrics(s["sample_id"], s["category"], dict(s["values"])) for s in d["per_sample"]],
            per_category={k: dict(v) for k, v in d["per_category"].items()},
            aggregate=dict(d["aggregate"]),
            stability=dict(d["stability"]),
            meta=dict(d.get("meta", {})),
        )

    def format_table(self, scaled: bool = True) -> str:
        """Plain-text table: one row per category, then Average and Stdev rows."""
        metrics = self.metrics
        header = ["Category"] + [DISPLAY_NAME.get(m, m) if scaled else m for m in metrics]

        def fmt(m, v):
            s = DISPLAY_SCALE.get(m, 1.0) if scaled else 1.0
            return f"{v * s:.3f}" if DISPLAY_SCALE.get(m, 1.0) == 1.0 else f"{v * s:.2f}"

        rows = [[c] + [fmt(m, self.per_category[m][c]) for m in metrics] for c in self.categories]
        footer = [
            ["Average"] + [fmt(m, self.aggregate[m]) for m in metrics],
            ["Stdev."] + [fmt(m, self.stability[m]) for m in metrics],
        ]
        return _render_rows(header, rows, footer)


def _render_rows(header: Sequence[str], rows: Sequence[Sequence[str]], footer: Sequence[Sequence[str]] = ()) -> str:
    allrows = [list(header)] + [list(r) for r in rows] + [list(r) for r in footer]
    widths = [max(len(r[i]) for r in allrows) for i in range(len(header))]

    def line(r):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))

    rule = "-" * len(line(header))
    out = [line(header), rule] + [line(r) for r in rows]
    if footer:
        out += [rule] + [line(r) for r in footer]
    return "\n".join(out)


def sample_stdev(values: Sequence[float]) -> float:
    """(n-1)-denominator standard deviation; 0 for fewer than two values."""
    values = np.asarray(list(values), dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def aggregate_report(per_sample: Sequence, meta: Optional[dict] = None) -> MetricReport:
    """Per-category means, their overall mean, and their sample stdev."""
    samples = [s if isinstance(s, SampleMetrics) else SampleMetrics(**s) for s in per_sample]
    if not samples:
        raise ValueError("cannot aggregate an empty sample list")
    for s in samples:
        if not s.category:
            raise ValueError(f"sample {s.sample_id!r} has no category label")
    metrics = list(dict.fromkeys(k for s in samples for k in s.values))
    categories = sorted({s.category for s in samples})
    per_category: Dict[str, Dict[str, float]] = {}
    aggregate: Dict[str, float] = {}
    stability: Dict[str, float] = {}
    for m in metrics:
        means = {}
        for c in categories:
            vals = [s.values[m] for s in samples if s.category == c and m in s.values]
            if vals:
                means[c] = float(np.mean(vals))
        per_category[m] = means
        aggregate[m] = float(np.mean(list(means.values())))
        stability[m] = sample_stdev(means.values())
    return MetricReport(samples, per_category, aggregate, stability, dict(meta or {}))


def improvement_percent(ours: float, baseline: float, direction: str = "higher-better") -> float:
    """Relative improvement of ``ours`` over ``baseline`` in percent (positive = better)."""
    if not baseline > 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    if direction == "higher-better":
        return 100.0 * (ours - baseline) / baseline
    if direction == "lower-better":
        return 100.0 * (baseline - ours) / baseline
    raise ValueError(f"unknown direction {direction!r}")


def mean_improvement_percent(ours: Sequence[float], baseline: Sequence[float], direction: str) -> float:
    """Average of per-entry improvements (e.g. across categories)."""
    if len(ours) != len(baseline) or not len(ours):
        raise ValueError("need equal-length, nonempty value lists")
    return float(np.mean([improvement_percent(o, b, direction) for o, b in zip(ours, baseline)]))


def difference_percent(value: float, reference: float) -> float:
    """How much larger ``value`` is than ``reference``, in percent."""
    if not reference > 0:
        raise ValueError(f"reference must be positive, got {reference}")
    return 100.0 * (value - reference) / reference
