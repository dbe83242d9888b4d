"""Ground-truth simulation harness.

Generates a synthetic electorate with known joint attribute/choice
distributions, pushes it through a platform-selection model that
over-represents configurable groups, then runs the full pipeline (screening,
quota sampling, oracle annotation, hierarchical smoothing, post-stratification)
and scores the estimates against the exactly tabulated truth. The point of the
harness: the post-stratified estimate should recover population quantities the
raw sample misses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from typing import Mapping, Optional, Sequence

import numpy as np

from .annotator import MockOracle, OracleConfig
from .domain import (
    FeatureDef,
    FeatureKind,
    QueryKind,
    StratCell,
    StratFrame,
    TweetRecord,
    UserRecord,
    marginalize_frame,
    normalize_category,
)
from .eval import AreaEstimate, bias, metric_report, rmse, spearman
from .filters import PollSettings, ProcessingLedger, poll_users
from .frame_builder import sample_daughter_frame
from .mrp import (
    AreaGraph,
    EffectSpec,
    ModelSpec,
    ParamLayout,
    RANDOM_WALK,
    SamplerSettings,
    UNSTRUCTURED,
    build_training_data,
    cell_probs,
    crosstab_partition,
    make_logpost,
    margin_draws,
    poststratify,
    sample,
)
from .pool import MockPlatformClient, QueryPlan, SearchQuery, SubjectPool


class SimError(Exception):
    pass


DEFAULT_ATTRIBUTES: dict[str, tuple[str, ...]] = {
    "sex": ("male", "female"),
    "age": ("18-34", "35-54", "55-64", "65+"),
    "income": ("low", "mid", "high"),
    "race": ("white", "black", "hispanic"),
    "vote2020": ("prev-d", "prev-r", "stayed-home"),
}

DEFAULT_MARGINALS: dict[str, tuple[float, ...]] = {
    "sex": (0.49, 0.51),
    "age": (0.30, 0.33, 0.18, 0.19),
    "income": (0.35, 0.40, 0.25),
    "race": (0.70, 0.15, 0.15),
    "vote2020": (0.42, 0.37, 0.21),
}

# choice-model coefficients: per choice, per attribute, per category (reference
# choice implicitly zero). Tuned so past vote dominates, as in real electorates.
DEFAULT_CHOICE_COEFS: dict[str, dict[str, tuple[float, ...]]] = {
    "R": {
        "sex": (0.2, -0.1),
        "age": (-0.25, 0.05, 0.2, 0.25),
        "income": (-0.1, 0.05, 0.2),
        "race": (0.25, -0.7, -0.1),
        "vote2020": (-3.0, 2.9, 0.0),
    },
    "other": {
        "sex": (0.05, -0.05),
        "age": (0.2, 0.0, -0.15, -0.3),
        "income": (0.0, 0.0, 0.0),
        "race": (0.0, -0.2, 0.1),
        "vote2020": (-2.0, -2.0, 4.0),
    },
}


@dataclass(frozen=True)
class PopulationConfig:
    areas: tuple[str, ...]
    adjacency: tuple[tuple[int, int], ...]
    size: int
    seed: int
    attributes: Mapping[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_ATTRIBUTES)
    )
    marginals: Mapping[str, tuple[float, ...]] = field(
        default_factory=lambda: dict(DEFAULT_MARGINALS)
    )
    choices: tuple[str, ...] = ("D", "R", "other")
    reference_choice: str = "D"
    choice_coefs: Mapping[str, Mapping[str, tuple[float, ...]]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_CHOICE_COEFS.items()}
    )
    choice_base: Mapping[str, float] = field(
        default_factory=lambda: {"R": 0.0, "other": -1.2}
    )
    area_effect_sd: float = 0.25
    area_attr_tilt: float = 0.35

    def __post_init__(self):
        if self.size < 1:
            raise SimError("population size must be >= 1")
        for title, cats in self.attributes.items():
            probs = self.marginals[title]
            if len(probs) != len(cats):
                raise SimError(f"{title}: marginal length mismatch")
            if abs(sum(probs) - 1.0) > 1e-9:
                raise SimError(f"{title}: marginals sum to {sum(probs)}")


@dataclass(frozen=True)
class SelectionConfig:
    """Log-odds of platform inclusion by attribute, plus the extra tilt toward
    the political capture stream for high-attention groups."""

    base_log_odds: float = -2.2
    attr_log_odds: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    political_base: float = -0.5
    attention_log_odds: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    stateless_rate: float = 0.0
    nonperson_rate: float = 0.0

    def __post_init__(self):
        for table in (self.attr_log_odds, self.attention_log_odds):
            for title, row in table.items():
                for cat, lo in row.items():
                    if not np.isfinite(lo):
                        raise SimError(f"non-finite log-odds for {title}={cat}")


@dataclass
class Population:
    cfg: PopulationConfig
    attrs: dict[str, np.ndarray]  # title -> (n,) category index
    area: np.ndarray  # (n,)
    choice: np.ndarray  # (n,) index into cfg.choices

    @property
    def n(self) -> int:
        return len(self.area)

    def margin(
        self, choice_a: str, choice_b: str, mask: Optional[np.ndarray] = None
    ) -> float:
        ia = self.cfg.choices.index(choice_a)
        ib = self.cfg.choices.index(choice_b)
        ch = self.choice if mask is None else self.choice[mask]
        if ch.size == 0:
            return float("nan")
        return float(np.mean(ch == ia) - np.mean(ch == ib))

    def area_margins(self, choice_a: str, choice_b: str) -> dict[str, float]:
        return {
            area: self.margin(choice_a, choice_b, mask=self.area == s)
            for s, area in enumerate(self.cfg.areas)
        }

    def crosstab_margins(
        self, title: str, choice_a: str, choice_b: str
    ) -> dict[str, float]:
        cats = self.cfg.attributes[title]
        idx = self.attrs[title]
        return {
            cat: self.margin(choice_a, choice_b, mask=idx == k)
            for k, cat in enumerate(cats)
        }

    def past_margins(self, prev_a: str, prev_b: str) -> dict[str, float]:
        """Area-level margins implied by the past-vote attribute."""
        cats = list(self.cfg.attributes["vote2020"])
        ia, ib = cats.index(prev_a), cats.index(prev_b)
        v = self.attrs["vote2020"]
        out = {}
        for s, area in enumerate(self.cfg.areas):
            mask = self.area == s
            out[area] = float(np.mean(v[mask] == ia) - np.mean(v[mask] == ib))
        return out

    def frame(self, area_title: str = "state") -> StratFrame:
        """Exact joint tabulation of (area x attributes) with count weights."""
        titles = list(self.cfg.attributes)
        sizes = [len(self.cfg.attributes[t]) for t in titles]
        key = self.area.copy()
        for t, size in zip(titles, sizes):
            key = key * size + self.attrs[t]
        counts = np.bincount(key, minlength=len(self.cfg.areas) * int(np.prod(sizes)))
        cells = []
        cid = 0
        for flat, count in enumerate(counts):
            rem, combo = flat, []
            for size in reversed(sizes):
                rem, k = divmod(rem, size)
                combo.append(k)
            s = rem
            combo.reverse()
            attrs = {area_title: self.cfg.areas[s]}
            for t, k in zip(titles, combo):
                attrs[t] = self.cfg.attributes[t][k]
            cid += 1
            cells.append(StratCell(cell_id=cid, attributes=attrs, weight=float(count)))
        return StratFrame(
            cells=tuple(cells), attribute_schema=(area_title, *titles)
        )

    def past_share_matrix(
        self, mapping: Mapping[str, str]
    ) -> np.ndarray:
        """(S, J) matrix of each choice's mapped past-category share per area."""
        cats = list(self.cfg.attributes["vote2020"])
        v = self.attrs["vote2020"]
        out = np.zeros((len(self.cfg.areas), len(self.cfg.choices)))
        for j, choice in enumerate(self.cfg.choices):
            if choice not in mapping:
                continue
            k = cats.index(mapping[choice])
            for s in range(len(self.cfg.areas)):
                mask = self.area == s
                out[s, j] = float(np.mean(v[mask] == k))
        return out


def generate_population(cfg: PopulationConfig) -> Population:
    """Sample individuals with area-tilted attribute distributions and choices
    from the configured softmax model. Deterministic under cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    n_areas = len(cfg.areas)
    # area sizes: roughly even with mild variation
    area_probs = rng.dirichlet(np.full(n_areas, 30.0))
    area = rng.choice(n_areas, size=cfg.size, p=area_probs)

    attrs: dict[str, np.ndarray] = {}
    for title, cats in cfg.attributes.items():
        base = np.asarray(cfg.marginals[title], dtype=float)
        tilts = rng.normal(0.0, cfg.area_attr_tilt, size=(n_areas, len(cats)))
        probs = base[None, :] * np.exp(tilts)
        probs /= probs.sum(axis=1, keepdims=True)
        u = rng.uniform(size=cfg.size)
        cum = np.cumsum(probs[area, :], axis=1)
        attrs[title] = (u[:, None] > cum).sum(axis=1)

    utilities = np.zeros((cfg.size, len(cfg.choices)))
    for j, choice in enumerate(cfg.choices):
        if choice == cfg.reference_choice:
            continue
        u_j = np.full(cfg.size, cfg.choice_base.get(choice, 0.0))
        area_eff = rng.normal(0.0, cfg.area_effect_sd, size=n_areas)
        u_j += area_eff[area]
        for title, coefs in cfg.choice_coefs.get(choice, {}).items():
            u_j += np.asarray(coefs, dtype=float)[attrs[title]]
        utilities[:, j] = u_j
    gumbel = rng.gumbel(size=utilities.shape)
    choice = np.argmax(utilities + gumbel, axis=1)
    return Population(cfg=cfg, attrs=attrs, area=area, choice=choice)


def inclusion_logits(pop: Population, sel: SelectionConfig) -> np.ndarray:
    logits = np.full(pop.n, sel.base_log_odds)
    for title, row in sel.attr_log_odds.items():
        cats = pop.cfg.attributes[title]
        table = np.array([row.get(c, 0.0) for c in cats])
        logits += table[pop.attrs[title]]
    return logits


def analytic_pool_margin_bias(
    pop: Population, sel: SelectionConfig, choice_a: str, choice_b: str
) -> float:
    """Exact expected raw-pool margin bias under the selection model:
    inclusion-probability-weighted margin minus the population margin."""
    w = 1.0 / (1.0 + np.exp(-inclusion_logits(pop, sel)))
    ia = pop.cfg.choices.index(choice_a)
    ib = pop.cfg.choices.index(choice_b)
    m = (pop.choice == ia).astype(float) - (pop.choice == ib).astype(float)
    return float(np.sum(w * m) / np.sum(w) - np.mean(m))


def simulate_platform(
    pop: Population, sel: SelectionConfig, seed: int, pool_date: Optional[date] = None
) -> tuple[SubjectPool, dict[str, dict], MockPlatformClient]:
    """Draw the platform pool by the selection model and synthesize profiles.

    Each included individual gets a profile whose description is a structured
    'title: category' sentence (readable by the mock oracle) and whose
    location is their area name, or the country label for stateless users.
    Returns the pool, a per-user ground-truth lookup, and a timeline client.
    """
    rng = np.random.default_rng(seed)
    pool_date = pool_date or date(2024, 10, 20)
    logits = inclusion_logits(pop, sel)
    include = rng.uniform(size=pop.n) < 1.0 / (1.0 + np.exp(-logits))
    idx = np.nonzero(include)[0]

    att = np.full(pop.n, sel.political_base)
    for title, row in sel.attention_log_odds.items():
        cats = pop.cfg.attributes[title]
        table = np.array([row.get(c, 0.0) for c in cats])
        att += table[pop.attrs[title]]
    political = rng.uniform(size=pop.n) < 1.0 / (1.0 + np.exp(-att))
    stateless = rng.uniform(size=pop.n) < sel.stateless_rate
    nonperson = rng.uniform(size=pop.n) < sel.nonperson_rate

    captured = datetime.combine(pool_date, datetime.min.time(), tzinfo=timezone.utc)
    entries = []
    truth: dict[str, dict] = {}
    timelines: dict[str, list[TweetRecord]] = {}
    for i in idx:
        uid = f"u{i:07d}"
        attrs = {
            t: pop.cfg.attributes[t][pop.attrs[t][i]] for t in pop.cfg.attributes
        }
        desc = "; ".join(f"{t}: {c}" for t, c in attrs.items())
        area_name = pop.cfg.areas[pop.area[i]]
        kind = QueryKind.POLITICAL if political[i] else QueryKind.TRENDING
        user = UserRecord(
            user_id=uid,
            username=uid,
            display_name=f"Sim User {i}",
            description=desc,
            location_raw=("USA" if stateless[i] else area_name),
            profile_image_ref=None,
            captured_at=captured,
            capture_query_kind=kind,
            capture_topic=None if political[i] else "trend",
        )
        tweets = [
            TweetRecord(
                tweet_id=f"{uid}-t0",
                author_id=uid,
                created_at=captured - timedelta(hours=5),
                text="posted about the campaign" if political[i] else "posted about a trend",
            )
        ]
        timelines[uid] = tweets + [
            TweetRecord(
                tweet_id=f"{uid}-t{k}",
                author_id=uid,
                created_at=captured - timedelta(days=k),
                text=f"timeline post {k}",
            )
            for k in range(1, 4)
        ]
        entries.append((user, tuple(tweets)))
        truth[uid] = {
            "attrs": attrs,
            "state": area_name,
            "stateless": bool(stateless[i]),
            "choice": pop.cfg.choices[pop.choice[i]],
            "person": not bool(nonperson[i]),
        }
    plan = QueryPlan(
        queries=(
            SearchQuery(text="political talk", weight=max(len(entries), 1), kind=QueryKind.POLITICAL),
            SearchQuery(text="trend", weight=max(len(entries), 1), kind=QueryKind.TRENDING, topic="trend"),
        )
    )
    pool = SubjectPool(entries=tuple(entries), pool_date=pool_date, plan=plan)
    client = MockPlatformClient([], timelines=timelines)
    return pool, truth, client


# ---------------------------------------------------------------------------
# Feature definitions for the simulated survey
# ---------------------------------------------------------------------------


def feature_defs_from_attributes(
    attributes: Mapping[str, Sequence[str]], kind: FeatureKind = FeatureKind.INDEPENDENT
) -> list[FeatureDef]:
    defs = []
    for title, cats in attributes.items():
        prefix = "".join(w[0] for w in title.replace("_", " ").split()).upper() or "X"
        options = tuple((f"{prefix}{i + 1}", c) for i, c in enumerate(cats))
        defs.append(FeatureDef(title=title, options=options, kind=kind))
    return defs


VOTE_TITLE = "vote2024"


@dataclass(frozen=True)
class PipelineConfig:
    sample_target: int = 1000
    window_days: int = 30
    m_politics: int = 3
    lam: float = 2.0
    oracle: OracleConfig = field(default_factory=OracleConfig)
    chains: int = 2
    iterations: int = 700
    warmup: int = 400
    thin: int = 2
    max_tree_depth: int = 10
    use_state_covariates: bool = True
    rw_titles: tuple[str, ...] = ("age", "income")
    choice_a: str = "R"
    choice_b: str = "D"
    past_share_of: Mapping[str, str] = field(
        default_factory=lambda: {"R": "prev-r", "other": "stayed-home"}
    )
    prev_a: str = "prev-r"
    prev_b: str = "prev-d"


def _model_spec_for(pop: Population, cfg: PipelineConfig) -> ModelSpec:
    effects = tuple(
        EffectSpec(
            title=t,
            levels=tuple(pop.cfg.attributes[t]),
            structure=RANDOM_WALK if t in cfg.rw_titles else UNSTRUCTURED,
        )
        for t in pop.cfg.attributes
    )
    z = None
    nu = None
    cov_map: dict[str, tuple[int, ...]] = {}
    interaction = None
    if cfg.use_state_covariates:
        nu = pop.past_share_matrix(cfg.past_share_of)
        cols = []
        for a_idx, choice in enumerate(
            c for c in pop.cfg.choices if c != pop.cfg.reference_choice
        ):
            j = pop.cfg.choices.index(choice)
            cols.append(nu[:, j])
            cov_map[choice] = (len(cols) - 1,)
        z = np.column_stack(cols)
        interaction = "vote2020"
    return ModelSpec(
        choices=pop.cfg.choices,
        reference=pop.cfg.reference_choice,
        areas=pop.cfg.areas,
        graph=AreaGraph.from_pairs(len(pop.cfg.areas), pop.cfg.adjacency),
        effects=effects,
        covariate_map=cov_map,
        z=z,
        nu=nu,
        interaction_title=interaction,
        include_spatial=True,
        include_no_state=True,
        include_poll_walk=False,
    )


def run_end_to_end(
    pop_cfg: PopulationConfig,
    sel_cfg: SelectionConfig,
    pipe_cfg: PipelineConfig,
    seed: int,
) -> dict:
    """Full protocol run against a simulated platform; returns the report.

    Stage errors are re-raised with the failing stage named.
    """
    stage = "population"
    try:
        pop = generate_population(replace(pop_cfg, seed=pop_cfg.seed + seed))
        truth_national = pop.margin(pipe_cfg.choice_a, pipe_cfg.choice_b)
        truth_state = pop.area_margins(pipe_cfg.choice_a, pipe_cfg.choice_b)
        past_state = pop.past_margins(pipe_cfg.prev_a, pipe_cfg.prev_b)

        stage = "platform"
        pool, truth, client = simulate_platform(pop, sel_cfg, seed=seed + 1)

        stage = "frames"
        mother = pop.frame()
        quota_mother = marginalize_frame(mother, list(pop.cfg.attributes))
        quotas = sample_daughter_frame(quota_mother, pipe_cfg.sample_target, seed + 2)

        stage = "annotation"
        features = feature_defs_from_attributes(pop.cfg.attributes)
        features += feature_defs_from_attributes(
            {VOTE_TITLE: tuple(pop.cfg.choices)}, kind=FeatureKind.DEPENDENT
        )
        oracle_cfg = replace(pipe_cfg.oracle, seed=pipe_cfg.oracle.seed + seed + 3)
        oracle = MockOracle(
            cfg=oracle_cfg,
            truth_attrs={
                uid: {**t["attrs"], VOTE_TITLE: t["choice"]} for uid, t in truth.items()
            },
            entity_map={uid: ("P" if t["person"] else "O") for uid, t in truth.items()},
            geo_map={
                uid: ("USA" if t["stateless"] else t["state"]) for uid, t in truth.items()
            },
        )
        outcome = poll_users(
            pool,
            ProcessingLedger(),
            quotas,
            oracle,
            client,
            features,
            PollSettings(
                window_days=pipe_cfg.window_days,
                m_politics=pipe_cfg.m_politics,
                lam=pipe_cfg.lam,
                seed=seed,
                poll_id="sim",
                known_areas=pop.cfg.areas,
            ),
        )
        responses = outcome.responses
        if not responses:
            raise SimError("no responses survived the cascade")

        stage = "raw-estimates"
        votes = [r.values[VOTE_TITLE].category for r in responses]
        votes_n = [normalize_category(v) for v in votes]
        a_key = normalize_category(pipe_cfg.choice_a)
        b_key = normalize_category(pipe_cfg.choice_b)
        raw_national = float(
            np.mean([v == a_key for v in votes_n]) - np.mean([v == b_key for v in votes_n])
        )
        states = {
            uid: (None if geo.stateless else geo.level2)
            for uid, geo in outcome.geo_by_user.items()
        }
        raw_state: dict[str, float] = {}
        for area in pop.cfg.areas:
            sel_votes = [
                normalize_category(r.values[VOTE_TITLE].category)
                for r in responses
                if states.get(r.user_id)
                and normalize_category(states[r.user_id]) == normalize_category(area)
            ]
            if sel_votes:
                raw_state[area] = float(
                    np.mean([v == a_key for v in sel_votes])
                    - np.mean([v == b_key for v in sel_votes])
                )

        stage = "model"
        spec = _model_spec_for(pop, pipe_cfg)
        layout = ParamLayout(spec)
        data = build_training_data(responses, states, spec, VOTE_TITLE)
        settings = SamplerSettings(
            chains=pipe_cfg.chains,
            iterations=pipe_cfg.iterations,
            warmup=pipe_cfg.warmup,
            thin=pipe_cfg.thin,
            max_tree_depth=pipe_cfg.max_tree_depth,
            seed=seed + 4,
        )
        draws = sample(make_logpost(data, spec, layout), layout.dim, settings)

        stage = "poststratify"
        probs = cell_probs(draws, mother, spec, layout)
        weights = np.array([c.weight for c in mother.cells])
        ia = spec.choice_index(pipe_cfg.choice_a)
        ib = spec.choice_index(pipe_cfg.choice_b)

        nat_labels, nat_map = crosstab_partition(mother, None)
        nat_post = poststratify(probs, weights, nat_map)
        nat_margins = margin_draws(nat_post, ia, ib)[:, 0]

        state_labels, state_map = crosstab_partition(mother, "state")
        state_post = poststratify(probs, weights, state_map)
        state_margins = margin_draws(state_post, ia, ib)

        crosstabs: dict[str, dict] = {}
        for title in pop.cfg.attributes:
            labels, cmap = crosstab_partition(mother, title)
            post = poststratify(probs, weights, cmap)
            margins = margin_draws(post, ia, ib)
            truth_ct = pop.crosstab_margins(title, pipe_cfg.choice_a, pipe_cfg.choice_b)
            crosstabs[title] = {
                lab: {
                    "estimate": float(np.median(margins[:, k])),
                    "lo": float(np.percentile(margins[:, k], 5)),
                    "hi": float(np.percentile(margins[:, k], 95)),
                    "truth": truth_ct[lab],
                }
                for k, lab in enumerate(labels)
            }

        stage = "evaluation"
        state_estimates = []
        label_to_col = {lab: k for k, lab in enumerate(state_labels)}
        for area in pop.cfg.areas:
            col = label_to_col[normalize_category(area)]
            d = state_margins[:, col]
            state_estimates.append(
                AreaEstimate(
                    area=area,
                    point=float(np.median(d)),
                    lo=float(np.percentile(d, 5)),
                    hi=float(np.percentile(d, 95)),
                    draws=d,
                )
            )
        post_report = metric_report(state_estimates, truth_state, previous=past_state)
        raw_common = [a for a in pop.cfg.areas if a in raw_state]
        raw_vs_truth = {
            "bias": bias([raw_state[a] for a in raw_common], [truth_state[a] for a in raw_common]),
            "rmse": rmse([raw_state[a] for a in raw_common], [truth_state[a] for a in raw_common]),
        }
        post_vs_truth_rmse = rmse(
            [e.point for e in state_estimates], [truth_state[e.area] for e in state_estimates]
        )

        report = {
            "config": {
                "seed": seed,
                "population": pop_cfg.size,
                "areas": list(pop_cfg.areas),
                "sample_target": pipe_cfg.sample_target,
                "choice_margin": f"{pipe_cfg.choice_a}-{pipe_cfg.choice_b}",
            },
            "sample": {
                "pool_size": len(pool.entries),
                "responses": len(responses),
                "refusals": outcome.refusals,
                "quota_filled": outcome.quotas.filled_total(),
                "quota_target": outcome.quotas.target_total(),
                "stateless": sum(1 for r in responses if states.get(r.user_id) is None),
            },
            "national": {
                "truth": truth_national,
                "raw": raw_national,
                "raw_error": raw_national - truth_national,
                "post_estimate": float(np.median(nat_margins)),
                "post_lo": float(np.percentile(nat_margins, 5)),
                "post_hi": float(np.percentile(nat_margins, 95)),
                "post_error": float(np.median(nat_margins)) - truth_national,
            },
            "state": {
                area: {
                    "truth": truth_state[area],
                    "raw": raw_state.get(area),
                    "post_estimate": e.point,
                    "post_lo": e.lo,
                    "post_hi": e.hi,
                }
                for area, e in zip(pop.cfg.areas, state_estimates)
            },
            "state_metrics": {
                "raw": raw_vs_truth,
                "post": {
                    "bias": post_report["bias"],
                    "rmse": post_vs_truth_rmse,
                    "spearman": post_report["spearman"],
                    "coverage90": post_report["coverage90"],
                },
                "per_area": post_report.get("per_area", {}),
            },
            "crosstabs": crosstabs,
            "diagnostics": {
                "divergences": draws.diagnostics.divergences,
                "tree_depth_saturations": draws.diagnostics.depth_hits,
                "worst_rhat": (
                    None
                    if np.isnan(draws.diagnostics.worst_rhat())
                    else round(draws.diagnostics.worst_rhat(), 4)
                ),
                "warnings": draws.diagnostics.warnings(),
            },
        }
        return report
    except SimError:
        raise
    except Exception as exc:
        raise SimError(f"stage {stage!r} failed: {exc}") from exc


def report_to_json_bytes(report: dict) -> bytes:
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode("utf-8")


# desk-scale default scenario: 8 areas on a ring with chords, heavy selection
# on past vote and income

def default_population_config(size: int = 50_000, seed: int = 11) -> PopulationConfig:
    areas = tuple(f"area-{i + 1}" for i in range(8))
    ring = [(i, (i + 1) % 8) for i in range(8)]
    chords = [(0, 4), (2, 6)]
    return PopulationConfig(
        areas=areas,
        adjacency=tuple(ring + chords),
        size=size,
        seed=seed,
        area_attr_tilt=0.6,
        area_effect_sd=0.15,
    )


def default_selection_config() -> SelectionConfig:
    """Selection strong enough that the pool is both skewed and shallow:
    with a 1,000-user target the under-represented cells cannot fill, so the
    accepted sample inherits a large share of the pool's bias."""
    return SelectionConfig(
        base_log_odds=-3.3,
        attr_log_odds={
            "vote2020": {"prev-r": 1.9, "prev-d": -1.0, "stayed-home": -1.4},
            "income": {"high": 0.6, "low": -0.4},
            "age": {"18-34": 0.45, "65+": -0.7},
        },
        political_base=-0.4,
        attention_log_odds={"vote2020": {"stayed-home": -1.0}},
        stateless_rate=0.04,
    )
