"""Posterior predictive cell probabilities, post-stratification, and the
training-data / persistence glue around the sampler."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from ..domain import StratCell, StratFrame, normalize_category
from .nuts import PosteriorDraws
from .spec import ModelSpec, ParamLayout, TrainingData


class PosteriorError(Exception):
    pass


class UnknownCategory(PosteriorError):
    pass


class EmptyCrosstab(PosteriorError):
    pass


def _level_index(levels: Sequence[str]) -> dict[str, int]:
    return {normalize_category(lv): i for i, lv in enumerate(levels)}


def cell_linear_predictor(
    draw_vec: np.ndarray,
    cell: StratCell,
    spec: ModelSpec,
    layout: ParamLayout,
    area_title: str = "state",
) -> np.ndarray:
    """Linear predictor over all J choices for one frame cell (reference 0).

    Uses only the terms defined for known-area predictions: intercept, area
    effect, individual effects, area covariates and the interaction. The
    no-area offset and the fieldwork walk never enter cell predictions.
    """
    con = layout.constrain(draw_vec)
    areas = _level_index(spec.areas)
    area_label = normalize_category(cell.attributes[area_title])
    if area_label not in areas:
        raise UnknownCategory(f"area {cell.attributes[area_title]!r} not in spec")
    s = areas[area_label]
    mu = con["alpha"].copy()
    if spec.include_spatial:
        mu = mu + con["lam"][s, :]
    for e in spec.effects:
        idx = _level_index(e.levels)
        cat = normalize_category(cell.attributes[e.title])
        if cat not in idx:
            raise UnknownCategory(f"{e.title}={cell.attributes[e.title]!r} not in spec")
        mu = mu + con[f"effect_{e.title}"][idx[cat], :]
    if layout.beta_entries:
        mu = mu + layout.area_covariate_term(con)[s, :]
    if spec.interaction_title is not None:
        e = spec.effect(spec.interaction_title)
        idx = _level_index(e.levels)
        v = idx[normalize_category(cell.attributes[spec.interaction_title])]
        cols = [spec.choice_index(c) for c in spec.active_choices]
        mu = mu + con["zeta"][v, :] * layout.nu_std[s, cols]
    full = np.zeros(len(spec.choices))
    for a, c in enumerate(spec.active_choices):
        full[spec.choice_index(c)] = mu[a]
    return full


def frame_cell_indices(
    frame: StratFrame, spec: ModelSpec, area_title: str = "state"
) -> dict[str, np.ndarray]:
    """Integer index arrays (one entry per cell) for vectorized prediction."""
    areas = _level_index(spec.areas)
    out: dict[str, np.ndarray] = {}
    try:
        out["area"] = np.array(
            [areas[normalize_category(c.attributes[area_title])] for c in frame.cells]
        )
    except KeyError as exc:
        raise UnknownCategory(f"area {exc.args[0]!r} not in spec") from exc
    for e in spec.effects:
        idx = _level_index(e.levels)
        try:
            out[e.title] = np.array(
                [idx[normalize_category(c.attributes[e.title])] for c in frame.cells]
            )
        except KeyError as exc:
            raise UnknownCategory(
                f"{e.title} category {exc.args[0]!r} not in spec"
            ) from exc
    return out


def cell_probs(
    draws: PosteriorDraws,
    frame: StratFrame,
    spec: ModelSpec,
    layout: ParamLayout,
    area_title: str = "state",
) -> np.ndarray:
    """(n_draws, n_cells, J) posterior predictive choice probabilities."""
    idx = frame_cell_indices(frame, spec, area_title)
    n_cells = len(frame.cells)
    jm = layout.jm
    cols = [spec.choice_index(c) for c in spec.active_choices]
    out = np.empty((draws.n_draws, n_cells, len(spec.choices)))
    for d in range(draws.n_draws):
        con = layout.constrain(draws.unconstrained[d])
        mu = np.tile(con["alpha"], (n_cells, 1))
        if spec.include_spatial:
            mu += con["lam"][idx["area"], :]
        for e in spec.effects:
            mu += con[f"effect_{e.title}"][idx[e.title], :]
        if layout.beta_entries:
            mu += layout.area_covariate_term(con)[idx["area"], :]
        if spec.interaction_title is not None:
            v_idx = idx[spec.interaction_title]
            mu += con["zeta"][v_idx, :] * layout.nu_std[np.ix_(idx["area"], cols)]
        full = np.zeros((n_cells, len(spec.choices)))
        full[:, cols] = mu
        full -= full.max(axis=1, keepdims=True)
        e_full = np.exp(full)
        out[d] = e_full / e_full.sum(axis=1, keepdims=True)
    return out


def poststratify(
    probs: np.ndarray,
    weights: np.ndarray,
    crosstab_map: np.ndarray,
    n_crosstabs: Optional[int] = None,
) -> np.ndarray:
    """Weighted average of cell probabilities within each crosstab.

    probs is (draws, cells, J); weights is (cells,) or (draws, cells);
    crosstab_map assigns each cell to one crosstab. Returns (draws, F, J).
    """
    d, c, j = probs.shape
    crosstab_map = np.asarray(crosstab_map, dtype=int)
    f = int(n_crosstabs if n_crosstabs is not None else crosstab_map.max() + 1)
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = np.broadcast_to(w, (d, c))
    num = np.zeros((d, f, j))
    den = np.zeros((d, f))
    for fi in range(f):
        mask = crosstab_map == fi
        if not mask.any():
            raise EmptyCrosstab(f"crosstab {fi} has no cells")
        wm = w[:, mask]
        den[:, fi] = wm.sum(axis=1)
        num[:, fi, :] = np.einsum("dc,dcj->dj", wm, probs[:, mask, :])
    if np.any(den <= 0):
        raise EmptyCrosstab("crosstab with nonpositive total weight")
    return num / den[:, :, None]


def margin_draws(post: np.ndarray, choice_a: int, choice_b: int) -> np.ndarray:
    """Per-draw share difference choice_a - choice_b; (draws, F)."""
    return post[:, :, choice_a] - post[:, :, choice_b]


def crosstab_partition(
    frame: StratFrame, title: Optional[str]
) -> tuple[list[str], np.ndarray]:
    """Assign cells to crosstabs by one attribute; None puts every cell in a
    single national crosstab."""
    if title is None:
        return ["national"], np.zeros(len(frame.cells), dtype=int)
    labels: list[str] = []
    index: dict[str, int] = {}
    assign = np.empty(len(frame.cells), dtype=int)
    for i, c in enumerate(frame.cells):
        cat = normalize_category(c.attributes[title])
        if cat not in index:
            index[cat] = len(labels)
            labels.append(cat)
        assign[i] = index[cat]
    return labels, assign


# ---------------------------------------------------------------------------
# Training data from silicon responses
# ---------------------------------------------------------------------------


def build_training_data(
    responses: Sequence,
    states: Mapping[str, Optional[str]],
    spec: ModelSpec,
    choice_title: str,
    poll_order: Optional[Sequence[str]] = None,
) -> TrainingData:
    """Index-encode responses against the model spec.

    A response's area is -1 (stateless) when its recorded state is missing or
    the country-level label; those rows require spec.include_no_state.
    """
    choice_idx = _level_index(spec.choices)
    area_idx = _level_index(spec.areas)
    effect_maps = {e.title: _level_index(e.levels) for e in spec.effects}
    polls = {p: i for i, p in enumerate(poll_order)} if poll_order else None

    y, area, poll = [], [], []
    eff: dict[str, list[int]] = {e.title: [] for e in spec.effects}
    for r in responses:
        if choice_title not in r.values:
            raise UnknownCategory(f"{r.user_id}: no value for {choice_title!r}")
        cat = normalize_category(r.values[choice_title].category)
        if cat not in choice_idx:
            raise UnknownCategory(f"{r.user_id}: choice {cat!r} not in spec")
        y.append(choice_idx[cat])
        state = states.get(r.user_id)
        if state is None or normalize_category(state) == "usa":
            area.append(-1)
        else:
            s = normalize_category(state)
            if s not in area_idx:
                raise UnknownCategory(f"{r.user_id}: area {state!r} not in spec")
            area.append(area_idx[s])
        for e in spec.effects:
            if e.title not in r.values:
                raise UnknownCategory(f"{r.user_id}: no value for {e.title!r}")
            cat_e = normalize_category(r.values[e.title].category)
            if cat_e not in effect_maps[e.title]:
                raise UnknownCategory(f"{r.user_id}: {e.title}={cat_e!r} not in spec")
            eff[e.title].append(effect_maps[e.title][cat_e])
        if polls is not None:
            poll.append(polls[r.poll_id])
    return TrainingData(
        y=np.array(y, dtype=int),
        area=np.array(area, dtype=int),
        effect_idx={k: np.array(v, dtype=int) for k, v in eff.items()},
        poll=np.array(poll, dtype=int) if polls is not None else None,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_draws_csv(
    draws: PosteriorDraws, layout: ParamLayout, path: str | Path
) -> None:
    """One row per retained draw, one column per natural-scale parameter."""
    names = layout.scalar_names()
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iter", *names])
        for d in range(draws.n_draws):
            con = layout.constrain(draws.unconstrained[d])
            values = layout.scalar_values(con)
            writer.writerow(
                [str(draws.chain[d]), str(draws.iteration[d])]
                + [repr(float(v)) for v in values]
            )


def save_diagnostics_json(draws: PosteriorDraws, path: str | Path) -> None:
    diag = draws.diagnostics
    obj = {
        "divergences": diag.divergences,
        "tree_depth_saturations": diag.depth_hits,
        "post_warmup_transitions": diag.post_warmup,
        "split_rhat": {k: (None if np.isnan(v) else round(v, 6)) for k, v in diag.rhat.items()},
        "warnings": diag.warnings(),
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def summarize_estimates(
    labels: Sequence[str],
    post: np.ndarray,
    choices: Sequence[str],
    percentiles: Sequence[float] = (5.0, 50.0, 95.0),
) -> list[dict]:
    """Percentile summary rows for post-stratified draws (draws, F, J)."""
    rows = []
    qs = np.percentile(post, percentiles, axis=0)  # (len(p), F, J)
    for fi, label in enumerate(labels):
        for ji, choice in enumerate(choices):
            rows.append(
                {
                    "crosstab": label,
                    "choice": choice,
                    **{
                        f"p{int(p)}": float(qs[pi, fi, ji])
                        for pi, p in enumerate(percentiles)
                    },
                }
            )
    return rows


def save_estimates_csv(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise PosteriorError("no estimate rows to write")
    cols = list(rows[0].keys())
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow(
                [repr(v) if isinstance(v, float) else str(v) for v in (row[c] for c in cols)]
            )
