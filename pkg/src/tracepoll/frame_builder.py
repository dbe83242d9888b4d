"""Stratification-frame machinery.

Smooths auxiliary-survey crosstabs with empirical-Bayes shrinkage toward the
margin-implied distribution, projects the smoothed past-vote dimension onto a
demographic frame (product extension), rakes cell weights to known margins by
iterative proportional fitting, and samples daughter quota frames.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .domain import QuotaState, StratCell, StratFrame, normalize_category


class FrameBuildError(Exception):
    pass


class EmptyAux(FrameBuildError):
    pass


class MissingCombo(FrameBuildError):
    pass


class NonConvergence(FrameBuildError):
    def __init__(self, achieved_error: float, max_iter: int):
        super().__init__(
            f"raking stopped at margin error {achieved_error:.3e} after {max_iter} sweeps"
        )
        self.achieved_error = achieved_error


class StructuralZero(FrameBuildError):
    pass


@dataclass(frozen=True)
class MarginTarget:
    """A known marginal distribution for one variable within one geography.

    geography=None applies to the whole frame; otherwise only cells whose
    area attribute matches are adjusted.
    """

    variable: str
    shares: Mapping[str, float]
    geography: Optional[str] = None

    def __post_init__(self):
        total = sum(self.shares.values())
        if abs(total - 1.0) > 1e-9:
            raise FrameBuildError(
                f"target {self.variable}/{self.geography}: shares sum to {total}"
            )


@dataclass(frozen=True)
class SmoothedCrosstab:
    """Per-demographic-combo distribution over the projected variable."""

    schema: tuple[str, ...]  # demographic titles keying the table
    variable: str  # projected variable title
    categories: tuple[str, ...]
    table: Mapping[tuple[str, ...], tuple[float, ...]]
    fallback: Optional[tuple[float, ...]] = None  # margin-implied, used when kappa > 0

    def distribution(self, attrs: Mapping[str, str]) -> tuple[float, ...]:
        key = tuple(normalize_category(attrs[t]) for t in self.schema)
        if key in self.table:
            return self.table[key]
        if self.fallback is not None:
            return self.fallback
        raise MissingCombo(f"no smoothed distribution for combo {key}")


def smooth_crosstabs(
    aux: Sequence[tuple[Mapping[str, str], str]],
    schema: Sequence[str],
    variable: str,
    kappa: float,
    categories: Optional[Sequence[str]] = None,
) -> SmoothedCrosstab:
    """Shrink per-combo category counts toward the aggregate margin.

    Each combo's distribution is (counts + kappa * margin) / (n + kappa), i.e.
    the margin gets pseudo-count weight kappa/(kappa + n). kappa -> 0 keeps the
    raw frequencies, kappa -> inf pools every combo to the margin.
    """
    if not aux:
        raise EmptyAux("auxiliary records required")
    if kappa < 0:
        raise FrameBuildError(f"kappa must be >= 0, got {kappa}")
    schema = tuple(schema)
    cats: dict[str, None] = {}
    if categories:
        for c in categories:
            cats.setdefault(normalize_category(c), None)
    for _, v in aux:
        cats.setdefault(normalize_category(v), None)
    cat_list = tuple(cats)
    cat_idx = {c: i for i, c in enumerate(cat_list)}

    margin = np.zeros(len(cat_list))
    combo_counts: dict[tuple[str, ...], np.ndarray] = {}
    for attrs, vote in aux:
        key = tuple(normalize_category(attrs[t]) for t in schema)
        if key not in combo_counts:
            combo_counts[key] = np.zeros(len(cat_list))
        j = cat_idx[normalize_category(vote)]
        combo_counts[key][j] += 1
        margin[j] += 1
    margin = margin / margin.sum()

    table = {}
    for key, counts in combo_counts.items():
        n = counts.sum()
        dist = (counts + kappa * margin) / (n + kappa) if (n + kappa) > 0 else margin
        table[key] = tuple(dist / dist.sum())
    return SmoothedCrosstab(
        schema=schema,
        variable=variable,
        categories=cat_list,
        table=table,
        fallback=tuple(margin) if kappa > 0 else None,
    )


def extend_frame(frame: StratFrame, smoothed: SmoothedCrosstab) -> StratFrame:
    """Split each cell by the projected variable; weight mass is conserved.

    Zero-probability daughter cells are kept at weight 0 so indexing stays
    aligned across frames.
    """
    new_cells = []
    cid = 0
    for cell in frame.cells:
        dist = smoothed.distribution(cell.attributes)
        for cat, p in zip(smoothed.categories, dist):
            cid += 1
            attrs = dict(cell.attributes)
            attrs[smoothed.variable] = cat
            new_cells.append(
                StratCell(cell_id=cid, attributes=attrs, weight=cell.weight * p)
            )
    return StratFrame(
        cells=tuple(new_cells),
        attribute_schema=frame.attribute_schema + (smoothed.variable,),
    )


def rake(
    frame: StratFrame,
    targets: Sequence[MarginTarget],
    tol: float = 1e-6,
    max_iter: int = 1000,
    area_title: str = "state",
    error_history: Optional[list[float]] = None,
) -> StratFrame:
    """Iterative proportional fitting of cell weights to the margin targets.

    Convergence is measured as the max absolute share error over every target
    category. Raises StructuralZero when a positive target sits on zero frame
    mass, NonConvergence when max_iter sweeps do not reach tol. When a list is
    passed as error_history the max margin error after each full sweep is
    appended to it.
    """
    weights = np.array([c.weight for c in frame.cells], dtype=float)

    # membership masks per (target, category)
    adjustments = []
    for target in targets:
        if target.geography is None:
            geo_mask = np.ones(len(frame.cells), dtype=bool)
        else:
            geo = normalize_category(target.geography)
            geo_mask = np.array(
                [
                    normalize_category(c.attributes.get(area_title, "")) == geo
                    for c in frame.cells
                ]
            )
        geo_total = weights[geo_mask].sum()
        cat_masks = []
        for cat, share in target.shares.items():
            catn = normalize_category(cat)
            mask = geo_mask & np.array(
                [
                    normalize_category(c.attributes.get(target.variable, "")) == catn
                    for c in frame.cells
                ]
            )
            if share > 0 and weights[mask].sum() == 0:
                raise StructuralZero(
                    f"target {target.variable}={cat} in {target.geography}: "
                    "no frame mass to scale"
                )
            cat_masks.append((mask, share))
        adjustments.append((geo_mask, cat_masks))

    def max_error(w: np.ndarray) -> float:
        err = 0.0
        for geo_mask, cat_masks in adjustments:
            total = w[geo_mask].sum()
            for mask, share in cat_masks:
                err = max(err, abs(w[mask].sum() / total - share))
        return err

    for _ in range(max_iter):
        if max_error(weights) <= tol:
            break
        for geo_mask, cat_masks in adjustments:
            total = w_geo = weights[geo_mask].sum()
            for mask, share in cat_masks:
                current = weights[mask].sum()
                if current > 0:
                    weights[mask] *= share * total / current
            # renormalize so the geography keeps its total weight
            new_total = weights[geo_mask].sum()
            if new_total > 0:
                weights[geo_mask] *= w_geo / new_total
        if error_history is not None:
            error_history.append(max_error(weights))
    else:
        achieved = max_error(weights)
        if achieved > tol:
            raise NonConvergence(achieved, max_iter)

    cells = tuple(
        StratCell(cell_id=c.cell_id, attributes=c.attributes, weight=w)
        for c, w in zip(frame.cells, weights)
    )
    return StratFrame(cells=cells, attribute_schema=frame.attribute_schema)


def sample_daughter_frame(
    mother: StratFrame, omega_star: int, seed: int
) -> QuotaState:
    """Draw quota targets: a multinomial split of omega_star units across
    cells proportional to mother weights. Counters start at zero."""
    weights = np.array([c.weight for c in mother.cells], dtype=float)
    total = weights.sum()
    if total <= 0:
        raise FrameBuildError("mother frame has no weight")
    rng = np.random.default_rng(seed)
    draws = rng.multinomial(omega_star, weights / total)
    quota = {c.cell_id: int(n) for c, n in zip(mother.cells, draws)}
    return QuotaState(frame=mother, quota=quota)


# ---------------------------------------------------------------------------
# Margin-target CSV: geography, variable, category, share
# ---------------------------------------------------------------------------


def load_margin_targets_csv(path: str | Path) -> list[MarginTarget]:
    grouped: dict[tuple[Optional[str], str], dict[str, float]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            geo = row["geography"].strip() or None
            key = (geo, row["variable"])
            grouped.setdefault(key, {})[row["category"]] = float(row["share"])
    return [
        MarginTarget(variable=var, shares=shares, geography=geo)
        for (geo, var), shares in grouped.items()
    ]


def save_margin_targets_csv(targets: Sequence[MarginTarget], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["geography", "variable", "category", "share"])
        for t in targets:
            for cat, share in t.shares.items():
                writer.writerow([t.geography or "", t.variable, cat, repr(share)])
