"""Estimate scoring: point error, calibration, density agreement, change
direction/magnitude, posterior plausibility, temporal congruence, and the
count-based pollster comparison machinery."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np


class EvalError(Exception):
    pass


class LengthMismatch(EvalError):
    pass


class DegenerateRanks(EvalError):
    pass


class TooFewDraws(EvalError):
    pass


class AllZero(EvalError):
    pass


class NoSharedAreas(EvalError):
    pass


def _paired(preds, obs) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float)
    o = np.asarray(obs, dtype=float)
    if p.shape != o.shape or p.ndim != 1 or p.size < 1:
        raise LengthMismatch(f"shapes {p.shape} vs {o.shape}")
    return p, o


def bias(preds, obs) -> float:
    """Mean signed error, predictions minus observations."""
    p, o = _paired(preds, obs)
    return float(np.mean(p - o))


def rmse(preds, obs) -> float:
    p, o = _paired(preds, obs)
    return float(np.sqrt(np.mean((o - p) ** 2)))


def average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(preds, obs) -> float:
    """Rank correlation with average ranks for ties."""
    p, o = _paired(preds, obs)
    if p.size < 2:
        raise LengthMismatch("need at least two pairs")
    rp = average_ranks(p)
    ro = average_ranks(o)
    dp = rp - rp.mean()
    do = ro - ro.mean()
    denom = np.sqrt(np.sum(dp**2) * np.sum(do**2))
    if denom == 0:
        raise DegenerateRanks("constant ranks on one side")
    return float(np.sum(dp * do) / denom)


@dataclass(frozen=True)
class AreaEstimate:
    area: str
    point: float
    lo: float  # 5th percentile
    hi: float  # 95th percentile
    draws: Optional[np.ndarray] = None


def coverage90(estimates: Sequence[AreaEstimate], obs: Sequence[float]) -> float:
    """Share of observations inside the closed 5-95 percentile interval."""
    if len(estimates) != len(obs):
        raise LengthMismatch(f"{len(estimates)} estimates vs {len(obs)} observations")
    hits = sum(1 for e, y in zip(estimates, obs) if e.lo <= y <= e.hi)
    return hits / len(estimates)


def _silverman_bandwidth(x: np.ndarray) -> float:
    n = x.size
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    scale = min(sd, iqr / 1.34) if iqr > 0 else sd
    if scale == 0:
        scale = max(abs(x[0]), 1e-12)
    return 0.9 * scale * n ** (-0.2)


def _kde_on_grid(x: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    """Binned Gaussian KDE: histogram the sample onto the grid, convolve."""
    step = grid[1] - grid[0]
    edges = np.concatenate([grid - step / 2, [grid[-1] + step / 2]])
    counts, _ = np.histogram(x, bins=edges)
    half = int(np.ceil(6 * bandwidth / step))
    kern_x = np.arange(-half, half + 1) * step
    kernel = np.exp(-0.5 * (kern_x / bandwidth) ** 2)
    kernel /= kernel.sum()
    dens = np.convolve(counts, kernel, mode="same") / (x.size * step)
    return dens


def ovl(draws_a, draws_b, points: int = 2048) -> float:
    """Overlap coefficient: integral of the pointwise minimum of the two
    kernel density estimates, on a shared grid with a pooled Silverman
    bandwidth. Clamped to [0, 1]."""
    a = np.asarray(draws_a, dtype=float)
    b = np.asarray(draws_b, dtype=float)
    if a.size < 10 or b.size < 10:
        raise TooFewDraws("need at least 10 draws on each side")
    pooled = np.concatenate([a, b])
    bw = _silverman_bandwidth(pooled)
    lo = pooled.min() - 3 * bw
    hi = pooled.max() + 3 * bw
    grid = np.linspace(lo, hi, points)
    da = _kde_on_grid(a, grid, bw)
    db = _kde_on_grid(b, grid, bw)
    integral = float(np.trapezoid(np.minimum(da, db), grid))
    return min(1.0, max(0.0, integral))


def _heaviside(x: np.ndarray | float) -> np.ndarray | float:
    """1 above zero, 0 below, one-half exactly at zero."""
    return np.where(np.asarray(x) > 0, 1.0, np.where(np.asarray(x) < 0, 0.0, 0.5))


def misdirection_prob(
    margin_draws_2024: Sequence[float], margin_2020: float, observed_2024: float
) -> float:
    """Posterior probability of calling the wrong direction of change against
    the previous result."""
    draws = np.asarray(margin_draws_2024, dtype=float)
    if draws.size == 0:
        raise EvalError("no margin draws")
    d_obs = float(_heaviside(observed_2024 - margin_2020))
    d_hat = float(np.mean(_heaviside(draws - margin_2020)))
    return abs(d_obs - d_hat)


def change_bias(margin_hat_2024: float, margin_2020: float, margin_obs_2024: float) -> float:
    """Predicted change minus observed change (the 2020 anchor cancels)."""
    return (margin_hat_2024 - margin_2020) - (margin_obs_2024 - margin_2020)


def posterior_pvalue(draws: Sequence[float], observed: float) -> float:
    """One-sided tail mass on the observed value's side of the draw median."""
    d = np.asarray(draws, dtype=float)
    if d.size == 0:
        raise EvalError("no draws")
    med = float(np.median(d))
    if observed >= med:
        return float(np.mean(d >= observed))
    return float(np.mean(d <= observed))


def temporal_corr_prob(
    series_draws: np.ndarray, reference: Sequence[float]
) -> tuple[float, int]:
    """Fraction of draws whose rank correlation with the reference series is
    strictly positive; degenerate draws count as non-positive.

    series_draws is (draws, T). Returns (probability, n_degenerate).
    """
    draws = np.asarray(series_draws, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != ref.size:
        raise LengthMismatch(f"draws {draws.shape} vs reference {ref.shape}")
    if ref.size < 3:
        raise EvalError("need at least 3 fieldwork periods")
    positive = 0
    degenerate = 0
    for row in draws:
        try:
            rho = spearman(row, ref)
        except DegenerateRanks:
            degenerate += 1
            continue
        if rho > 0:
            positive += 1
    return positive / draws.shape[0], degenerate


def dirichlet_margin_draws(
    counts: Sequence[float],
    n_draws: int,
    seed: int,
    choice_a: int = 0,
    choice_b: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Conjugate-posterior share draws from declared supporter counts.

    Returns (share draws (n_draws, J), margin draws choice_a - choice_b).
    Zero counts are kept as-is: the corresponding component is degenerate at
    zero, which is the honest reading of a pollster reporting no supporters.
    """
    alpha = np.asarray(counts, dtype=float)
    if alpha.sum() <= 0:
        raise AllZero("all candidate counts are zero")
    rng = np.random.default_rng(seed)
    positive = alpha > 0
    shares = np.zeros((n_draws, alpha.size))
    shares[:, positive] = rng.dirichlet(alpha[positive], size=n_draws)
    margins = shares[:, choice_a] - shares[:, choice_b]
    return shares, margins


@dataclass(frozen=True)
class PollsterRecord:
    name: str
    rating: str
    counts: Mapping[str, Mapping[str, float]]  # area -> candidate -> count
    start_date: Optional[str] = None
    end_date: Optional[str] = None

    def __post_init__(self):
        for area, row in self.counts.items():
            values = list(row.values())
            if any(v < 0 for v in values) or not any(v > 0 for v in values):
                raise EvalError(f"{self.name}/{area}: counts must be nonnegative, one positive")


MIN_AREAS_FOR_SPEARMAN = 4  # rank comparisons are unstable below this


def _winner_correct(point_margin: float, observed_margin: float) -> bool:
    if point_margin == 0:
        return False  # a tied point estimate calls no winner
    return (point_margin > 0) == (observed_margin > 0)


def compare_pollsters(
    estimate_draws: Mapping[str, np.ndarray],
    pollsters: Sequence[PollsterRecord],
    results: Mapping[str, float],
    choice_a: str,
    choice_b: str,
    dirichlet_draws: int = 2000,
    seed: int = 0,
) -> list[dict]:
    """Per-pollster metric differences (our estimate minus the pollster's) on
    the margin between two named choices, matched on the pollster's areas.

    The pollster's margin distribution per area comes from conjugate draws on
    its declared counts. The rank-correlation column is only filled when the
    pollster shares more than three scored areas.
    """
    rows = []
    for rec in pollsters:
        shared = sorted(
            a for a in rec.counts if a in estimate_draws and a in results
        )
        if not shared:
            raise NoSharedAreas(f"pollster {rec.name} shares no scored areas")
        ours_point, theirs_point, obs = [], [], []
        ours_cover, theirs_cover = [], []
        ours_acc, theirs_acc = [], []
        ovls = []
        for k, area in enumerate(shared):
            mine = np.asarray(estimate_draws[area], dtype=float)
            cand = rec.counts[area]
            labels = sorted(cand)
            counts = [cand[c] for c in labels]
            ia, ib = labels.index(choice_a), labels.index(choice_b)
            _, theirs = dirichlet_margin_draws(
                counts, dirichlet_draws, seed=seed + 7919 * k, choice_a=ia, choice_b=ib
            )
            y = results[area]
            obs.append(y)
            ours_point.append(float(np.median(mine)))
            theirs_point.append(float(np.median(theirs)))
            ours_cover.append(
                float(np.percentile(mine, 5) <= y <= np.percentile(mine, 95))
            )
            theirs_cover.append(
                float(np.percentile(theirs, 5) <= y <= np.percentile(theirs, 95))
            )
            ours_acc.append(float(_winner_correct(ours_point[-1], y)))
            theirs_acc.append(float(_winner_correct(theirs_point[-1], y)))
            ovls.append(ovl(mine, theirs))
        row = {
            "pollster": rec.name,
            "rating": rec.rating,
            "n_areas": len(shared),
            "delta_bias": bias(ours_point, obs) - bias(theirs_point, obs),
            "delta_rmse": rmse(ours_point, obs) - rmse(theirs_point, obs),
            "delta_coverage": float(np.mean(ours_cover) - np.mean(theirs_cover)),
            "delta_accuracy": float(np.mean(ours_acc) - np.mean(theirs_acc)),
            "mean_ovl": float(np.mean(ovls)),
            "delta_spearman": None,
        }
        if len(shared) >= MIN_AREAS_FOR_SPEARMAN:
            row["delta_spearman"] = spearman(ours_point, obs) - spearman(
                theirs_point, obs
            )
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def load_pollsters_csv(path: str | Path) -> list[PollsterRecord]:
    """Columns: pollster, rating, area, candidate, count, start_date, end_date."""
    grouped: dict[str, dict] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            g = grouped.setdefault(
                row["pollster"],
                {
                    "rating": row["rating"],
                    "counts": {},
                    "start_date": row.get("start_date"),
                    "end_date": row.get("end_date"),
                },
            )
            g["counts"].setdefault(row["area"], {})[row["candidate"]] = float(
                row["count"]
            )
    return [
        PollsterRecord(
            name=name,
            rating=g["rating"],
            counts=g["counts"],
            start_date=g["start_date"],
            end_date=g["end_date"],
        )
        for name, g in grouped.items()
    ]


def save_comparison_csv(rows: Sequence[dict], path: str | Path) -> None:
    cols = [
        "pollster", "rating", "n_areas", "delta_bias", "delta_rmse",
        "delta_spearman", "delta_coverage", "delta_accuracy", "mean_ovl",
    ]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow(
                ["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else str(row[c])) for c in cols]
            )


def metric_report(
    estimates: Sequence[AreaEstimate],
    observed: Mapping[str, float],
    previous: Optional[Mapping[str, float]] = None,
) -> dict:
    """The standard per-area scorecard as one JSON-ready mapping."""
    areas = [e.area for e in estimates if e.area in observed]
    est = {e.area: e for e in estimates}
    preds = [est[a].point for a in areas]
    obs = [observed[a] for a in areas]
    report: dict = {
        "n_areas": len(areas),
        "bias": bias(preds, obs),
        "rmse": rmse(preds, obs),
        "coverage90": coverage90([est[a] for a in areas], obs),
    }
    try:
        report["spearman"] = spearman(preds, obs)
    except (DegenerateRanks, LengthMismatch):
        report["spearman"] = None
    if previous is not None:
        per_area = {}
        for a in areas:
            if a not in previous:
                continue
            entry = {
                "change_bias": change_bias(est[a].point, previous[a], observed[a])
            }
            if est[a].draws is not None:
                entry["misdirection_prob"] = misdirection_prob(
                    est[a].draws, previous[a], observed[a]
                )
                entry["posterior_pvalue"] = posterior_pvalue(est[a].draws, observed[a])
            per_area[a] = entry
        report["per_area"] = per_area
    return report
