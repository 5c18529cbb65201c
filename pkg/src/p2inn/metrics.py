"""Error metrics over test points and their aggregation across instances and seeds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

REPORT_COLUMNS = ("family", "range", "instance_id", "seed", "abs", "rel", "max", "exp_var")


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise ValueError(f"prediction and truth must be equal-length and non-empty, got {p.shape} and {t.shape}")
    return p, t


def l2_errors(pred, truth) -> tuple[float, float]:
    """(RMS error, ||pred - truth|| / ||truth||).

    The relative error is NaN when ``truth`` is identically zero.
    """
    p, t = _pair(pred, truth)
    diff = np.linalg.norm(p - t)
    tn = np.linalg.norm(t)
    rel = diff / tn if tn > 0 else math.nan
    return float(diff / math.sqrt(p.size)), float(rel)


def max_error(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.max(np.abs(p - t)))


def explained_variance(pred, truth) -> float:
    """1 - Var(truth - pred) / Var(truth), population variances; NaN if truth is constant."""
    p, t = _pair(pred, truth)
    vt = np.var(t)
    if vt == 0:
        return math.nan
    return float(1.0 - np.var(t - p) / vt)


@dataclass
class InstanceMetrics:
    family: str
    range: str
    instance_id: str
    seed: int
    abs: float
    rel: float
    max: float
    exp_var: float


def evaluate(pred, truth, family="", range_="", instance_id="", seed=0) -> InstanceMetrics:
    a, r = l2_errors(pred, truth)
    return InstanceMetrics(family, range_, instance_id, seed, a, r, max_error(pred, truth), explained_variance(pred, truth))


@dataclass
class MetricsReport:
    rows: list[InstanceMetrics] = field(default_factory=list)

    def add(self, row: InstanceMetrics) -> None:
        self.rows.append(row)

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.rows]))

    def seed_means(self, metric: str) -> dict[int, float]:
        by = {}
        for r in self.rows:
            by.setdefault(r.seed, []).append(getattr(r, metric))
        return {s: float(np.mean(v)) for s, v in sorted(by.items())}

    def std_over_seeds(self, metric: str) -> float:
        """Population std of the per-seed means (0 for a single seed)."""
        return float(np.std(list(self.seed_means(metric).values())))

    def aggregate(self) -> dict:
        metrics = ("abs", "rel", "max", "exp_var")
        return {
            "mean": {m: self.mean(m) for m in metrics},
            "std": {m: self.std_over_seeds(m) for m in metrics},
            "n_instances": len({r.instance_id for r in self.rows}),
            "n_seeds": len({r.seed for r in self.rows}),
        }

    def write_csv(self, path) -> None:
        """One row per (instance, seed), then ``mean`` and ``std`` aggregate rows."""
        agg = self.aggregate()
        family = self.rows[0].family if self.rows else ""
        rng = self.rows[0].range if self.rows else ""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.family, r.range, r.instance_id, r.seed] + [_f(getattr(r, m)) for m in ("abs", "rel", "max", "exp_var")])
            for kind in ("mean", "std"):
                w.writerow([family, rng, kind, "all"] + [_f(agg[kind][m]) for m in ("abs", "rel", "max", "exp_var")])

    @classmethod
    def read_csv(cls, path) -> tuple["MetricsReport", dict]:
        """Returns the per-instance rows and the aggregate rows keyed by ``mean``/``std``."""
        rows, agg = [], {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
                raise ValueError(f"{path}: unexpected report columns {reader.fieldnames}")
            for rec in reader:
                vals = {m: float(rec[m]) for m in ("abs", "rel", "max", "exp_var")}
                if rec["seed"] == "all":
                    agg[rec["instance_id"]] = vals
                    continue
                rows.append(InstanceMetrics(rec["family"], rec["range"], rec["instance_id"], int(rec["seed"]), **vals))
        return cls(rows), agg


def _f(v: float) -> str:
    return repr(float(v))


def improvement(baseline: float, ours: float) -> float:
    """Improvement ratio in percent: 100 (baseline - ours) / baseline."""
    if baseline == 0:
        return math.nan
    return 100.0 * (baseline - ours) / baseline


assert tuple(f.name for f in fields(InstanceMetrics)) == REPORT_COLUMNS
