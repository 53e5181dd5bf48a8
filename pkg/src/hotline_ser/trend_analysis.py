"""Session-level emotion trend statistics: NSS, ECR, bootstrap intervals, group tests.

A scored session is a time-ordered list of ``(t_start_s, t_end_s, p)`` where
``p`` is the model's probability of negative emotion for that segment.

* NSS counts segments with ``p > threshold`` inside a stage window.
* ECR is the mean absolute step between consecutive probabilities,
  ``sum_i |p_i - p_{i-1}| / (n - 1)``, undefined for fewer than two points.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .numerics import derive_rng

REPORT_SCHEMA_VERSION = 1
TIMELINE_SCHEMA_VERSION = 1
GROUPS = ("suicide", "non_suicide")
STAGES = ("assessment", "full")
ASSESSMENT_S = 1800.0
GROUP_NAMES = {"suicide": "Suicide", "non_suicide": "Non-suicide"}
STAGE_NAMES = {"assessment": "Assessment", "full": "Full"}
TABLE_COLUMNS = ("Group", "Stage", "NSS (95% BCI)", "ECR (95% BCI)")


class EmptyWindowWarning(UserWarning):
    """A stage window contains no scored segments."""


@dataclass
class SessionTimeline:
    session_id: str
    points: np.ndarray                      # (n, 3): t_start_s, t_end_s, prob_negative
    group: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.group is not None and self.group not in GROUPS:
            raise ValueError(f"{self.session_id}: unknown group {self.group!r}")
        if np.any(pts[:, 1] < pts[:, 0]):
            raise ValueError(f"{self.session_id}: segment ends before it starts")
        if np.any(np.diff(pts[:, 0]) < 0) or np.any(pts[1:, 0] < pts[:-1, 1]):
            raise ValueError(f"{self.session_id}: points must be ordered and non-overlapping")
        if np.any((pts[:, 2] < 0) | (pts[:, 2] > 1)) or not np.all(np.isfinite(pts)):
            raise ValueError(f"{self.session_id}: probabilities must lie in [0, 1]")
        self.points = pts

    @property
    def probs(self) -> np.ndarray:
        return self.points[:, 2]

    @property
    def duration_s(self) -> float:
        return float(self.points[:, 1].max()) if len(self.points) else 0.0

    def window(self, stage: str = "full", assessment_s: float = ASSESSMENT_S) -> np.ndarray:
        """Probabilities of the points that start inside the stage window."""
        if stage == "full":
            return self.probs
        if stage == "assessment":
            return self.probs[self.points[:, 0] < assessment_s]
        raise ValueError(f"unknown stage {stage!r}")


def _probs(timeline, stage, assessment_s) -> np.ndarray:
    if isinstance(timeline, SessionTimeline):
        return timeline.window(stage, assessment_s)
    return np.asarray(timeline, dtype=np.float64)


def nss(timeline, threshold: float = 0.5, stage: str = "full", assessment_s: float = ASSESSMENT_S) -> int:
    """Negative speech segments: count of ``p > threshold`` in the window (0 with a warning if empty)."""
    p = _probs(timeline, stage, assessment_s)
    if len(p) == 0:
        warnings.warn("empty window: NSS reported as 0", EmptyWindowWarning, stacklevel=2)
        return 0
    return int(np.count_nonzero(p > threshold))


def ecr(timeline, stage: str = "full", assessment_s: float = ASSESSMENT_S) -> float | None:
    """Emotion change rate; ``None`` when fewer than two points fall in the window."""
    p = _probs(timeline, stage, assessment_s)
    if len(p) < 2:
        return None
    return float(np.abs(np.diff(p)).sum() / (len(p) - 1))


# -- resampling statistics -----------------------------------------------------
def bootstrap_ci(values, level: float = 0.95, iters: int = 10000, seed: int = 0,
                 stream: str = "bootstrap") -> tuple[float, float]:
    """Percentile interval of the mean, resampling the given (per-subject) values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("bootstrap needs at least one value")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if np.all(v == v[0]):
        # every resample has the same mean; skip summation rounding
        return float(v[0]), float(v[0])
    rng = derive_rng(seed, stream)
    means = v[rng.integers(0, v.size, size=(iters, v.size))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def _n_splits(n_a: int, n_b: int) -> int:
    return math.comb(n_a + n_b, n_a)


def permutation_pvalue(group_a, group_b, iters: int = 10000, seed: int = 0, exact: bool | None = None,
                       method: str = "permutation", stream: str = "permutation") -> float:
    """Two-sided test of equal group means.

    ``exact=None`` enumerates every relabeling when there are at most ``iters``
    of them (p = share of splits with |diff| >= observed); otherwise Monte
    Carlo with p = (1 + hits) / (1 + iters). ``method="mannwhitney"`` uses
    the rank-sum test instead.
    """
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups need at least one value")
    if method == "mannwhitney":
        return float(stats.mannwhitneyu(a, b, alternative="two-sided").pvalue)
    if method != "permutation":
        raise ValueError(f"unknown method {method!r}")
    pooled = np.concatenate([a, b])
    observed = abs(a.mean() - b.mean())
    tol = 1e-12 * max(1.0, float(np.abs(pooled).max()))
    if exact is None:
        exact = _n_splits(a.size, b.size) <= iters
    if exact:
        combos = np.array(list(itertools.combinations(range(pooled.size), a.size)), dtype=np.int64)
        in_a = np.zeros((len(combos), pooled.size), dtype=bool)
        in_a[np.arange(len(combos))[:, None], combos] = True
        sum_a = (in_a * pooled).sum(axis=1)
        diff = np.abs(sum_a / a.size - (pooled.sum() - sum_a) / b.size)
        return float(np.count_nonzero(diff >= observed - tol) / len(combos))
    rng = derive_rng(seed, stream)
    perms = rng.permuted(np.tile(pooled, (iters, 1)), axis=1)
    diff = np.abs(perms[:, :a.size].mean(axis=1) - perms[:, a.size:].mean(axis=1))
    return float((1 + np.count_nonzero(diff >= observed - tol)) / (1 + iters))


# -- report ---------------------------------------------------------------------
@dataclass(frozen=True)
class TrendConfig:
    threshold: float = 0.5
    assessment_s: float = ASSESSMENT_S
    level: float = 0.95
    iters: int = 10000
    seed: int = 0
    test: str = "permutation"
    smoothing_window: int = 5


@dataclass
class TrendReport:
    config: dict
    sessions: list[dict]
    groups: dict
    p_values: dict | None
    config_hash: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "config_hash": self.config_hash,
                "config": self.config, "groups": self.groups, "p_values": self.p_values,
                "sessions": self.sessions, "notes": self.notes}

    def table_rows(self) -> list[dict]:
        """One row per group x stage with "mean [lo, hi]" cells."""
        rows = []
        for g in GROUPS:
            if g not in self.groups:
                continue
            for s in STAGES:
                cell = self.groups[g][s]
                rows.append({"Group": GROUP_NAMES[g], "Stage": STAGE_NAMES[s],
                             "NSS (95% BCI)": cell["nss_cell"], "ECR (95% BCI)": cell["ecr_cell"]})
        return rows


def format_cell(mean, ci, digits: int) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.{digits}f} [{ci[0]:.{digits}f}, {ci[1]:.{digits}f}]"


def session_metrics(tl: SessionTimeline, cfg: TrendConfig = TrendConfig()) -> dict:
    out = {"session_id": tl.session_id, "group": tl.group, "n_points": int(len(tl.points)),
           "duration_s": tl.duration_s, "short_session": tl.duration_s <= cfg.assessment_s}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyWindowWarning)
        for s in STAGES:
            out[f"empty_{s}"] = len(tl.window(s, cfg.assessment_s)) == 0
            out[f"nss_{s}"] = nss(tl, cfg.threshold, s, cfg.assessment_s)
            out[f"ecr_{s}"] = ecr(tl, s, cfg.assessment_s)
    return out


def _aggregate(values, cfg: TrendConfig, stream: str):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, 0
    mean = float(np.mean(vals))
    return mean, list(bootstrap_ci(vals, cfg.level, cfg.iters, cfg.seed, stream)), len(vals)


def build_report(timelines: list[SessionTimeline], cfg: TrendConfig = TrendConfig(),
                 config_hash: str = "") -> TrendReport:
    if not timelines:
        raise ValueError("no sessions to analyze")
    per_session = [session_metrics(tl, cfg) for tl in timelines]
    groups = {}
    labeled = [g for g in GROUPS if any(r["group"] == g for r in per_session)]
    keys = labeled or [None]
    for g in keys:
        rows = [r for r in per_session if r["group"] == g] if g else per_session
        name = g or "all"
        groups[name] = {}
        for s in STAGES:
            nm, nci, n_n = _aggregate([r[f"nss_{s}"] for r in rows], cfg, f"boot/{name}/{s}/nss")
            em, eci, n_e = _aggregate([r[f"ecr_{s}"] for r in rows], cfg, f"boot/{name}/{s}/ecr")
            groups[name][s] = {"n_sessions": n_n, "nss_mean": nm, "nss_ci": nci, "n_ecr": n_e,
                               "ecr_mean": em, "ecr_ci": eci,
                               "nss_cell": format_cell(nm, nci, 0), "ecr_cell": format_cell(em, eci, 2)}
    notes = []
    p_values = None
    if len(labeled) == 2:
        p_values = {}
        for s in STAGES:
            p_values[s] = {}
            for metric in ("nss", "ecr"):
                a = [r[f"{metric}_{s}"] for r in per_session if r["group"] == GROUPS[0] and r[f"{metric}_{s}"] is not None]
                b = [r[f"{metric}_{s}"] for r in per_session if r["group"] == GROUPS[1] and r[f"{metric}_{s}"] is not None]
                p_values[s][f"p_{metric}"] = (
                    permutation_pvalue(a, b, cfg.iters, cfg.seed, method=cfg.test, stream=f"perm/{s}/{metric}")
                    if a and b else None)
    else:
        notes.append("p-values omitted: fewer than two labeled groups")
    n_short = sum(r["short_session"] for r in per_session)
    if n_short:
        notes.append(f"{n_short} session(s) no longer than the assessment window: assessment stage equals full stage")
    return TrendReport(config=_cfg_dict(cfg), sessions=per_session, groups=groups, p_values=p_values,
                       config_hash=config_hash, notes=notes)


def _cfg_dict(cfg: TrendConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


# -- I/O --------------------------------------------------------------------------
def read_timelines(path) -> list[SessionTimeline]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(SessionTimeline(str(rec["session_id"]), rec["points"], rec.get("group")))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_timelines(path, timelines: list[SessionTimeline]) -> None:
    with open(path, "w") as fh:
        for tl in timelines:
            fh.write(json.dumps({"schema_version": TIMELINE_SCHEMA_VERSION, "session_id": tl.session_id,
                                 "group": tl.group, "points": tl.points.tolist()}, sort_keys=True) + "\n")


def timelines_from_scores(records: list[dict], probs, groups: dict | None = None) -> list[SessionTimeline]:
    """Assemble timelines from manifest rows (session_id, start_s, end_s) and their scores."""
    by_session: dict[str, list] = {}
    for rec, p in zip(records, probs):
        if rec.get("start_s") is None or rec.get("end_s") is None:
            raise ValueError(f"{rec.get('path')}: segment lacks start_s/end_s")
        by_session.setdefault(rec["session_id"], []).append((float(rec["start_s"]), float(rec["end_s"]), float(p)))
    groups = groups or {}
    return [SessionTimeline(sid, sorted(pts), groups.get(sid)) for sid, pts in sorted(by_session.items())]


def moving_average(p: np.ndarray, window: int = 5) -> np.ndarray:
    """Trailing mean over up to ``window`` points."""
    c = np.concatenate([[0.0], np.cumsum(p)])
    i = np.arange(1, len(p) + 1)
    lo = np.maximum(i - window, 0)
    return (c[i] - c[lo]) / (i - lo)


def write_session_csv(path, timelines: list[SessionTimeline], window: int = 5) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session_id", "group", "t_start_s", "t_end_s", "prob_negative", f"prob_negative_ma{window}"])
        for tl in timelines:
            ma = moving_average(tl.probs, window)
            for (t0, t1, p), m in zip(tl.points, ma):
                w.writerow([tl.session_id, tl.group or "", repr(float(t0)), repr(float(t1)),
                            repr(float(p)), repr(float(m))])


def write_table_csv(path, report: TrendReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(report.table_rows())
