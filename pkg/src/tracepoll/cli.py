"""Batch command-line surface over the pipeline.

Subcommands mirror the pipeline stages: pool acquisition, the polling
cascade, model fitting with post-stratified estimates, estimate scoring, and
the ground-truth simulation. All plotting is delegated to the emitted CSV/JSON
files. Exit codes: 0 success, 2 config error, 3 stage error, 4 convergence
warnings exceeded thresholds.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import date
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .annotator import MockOracle, OracleConfig
from .domain import (
    FeatureDef,
    QuotaState,
    feature_def_from_dict,
    load_frame_csv,
    marginalize_frame,
)
from .eval import (
    AreaEstimate,
    compare_pollsters,
    load_pollsters_csv,
    metric_report,
    save_comparison_csv,
)
from .filters import (
    PollSettings,
    ProcessingLedger,
    load_responses_jsonl,
    poll_users,
    save_responses_jsonl,
)
from .frame_builder import sample_daughter_frame
from .mrp import (
    ParamLayout,
    SamplerSettings,
    build_training_data,
    cell_probs,
    crosstab_partition,
    make_logpost,
    margin_draws,
    poststratify,
    sample,
    save_diagnostics_json,
    save_draws_csv,
    save_estimates_csv,
    spec_from_config,
    summarize_estimates,
)
from .pool import MockPlatformClient, build_query_plan, load_pool_jsonl, run_pool, save_pool_jsonl
from .prompts import is_highly_speculative
from .simharness import (
    PipelineConfig,
    PopulationConfig,
    SelectionConfig,
    report_to_json_bytes,
    run_end_to_end,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_NONCONVERGENCE = 4


class ConfigError(Exception):
    pass


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        raise ConfigError("--config is required for this command")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc


def _require(cfg: dict, *keys: str):
    node = cfg
    for k in keys:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"config missing key {'.'.join(keys)}")
        node = node[k]
    return node


def _out_dir(cfg: dict, override: Optional[str]) -> Path:
    out = Path(override or _require(cfg, "paths", "output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _features_from_config(cfg: dict) -> list[FeatureDef]:
    return [feature_def_from_dict(f) for f in _require(cfg, "features")]


def _oracle_from_config(cfg: dict, seed: Optional[int]) -> MockOracle:
    ocfg = cfg.get("oracle", {})
    oracle_cfg = OracleConfig(
        confusion=ocfg.get("confusion", {}),
        speculation_mean=ocfg.get("speculation_mean", {}),
        speculation_spread=ocfg.get("speculation_spread", {}),
        default_speculation=ocfg.get("default_speculation", 0.0),
        rejection_rate=ocfg.get("rejection_rate", 0.0),
        seed=seed if seed is not None else ocfg.get("seed", 0),
    )
    return MockOracle(cfg=oracle_cfg)


# ---------------------------------------------------------------------------
# pool
# ---------------------------------------------------------------------------


def cmd_pool(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args.output)
    pool_cfg = _require(cfg, "pool")
    fixtures = Path(_require(cfg, "paths", "fixtures"))
    if not fixtures.exists():
        raise ConfigError(f"fixture file {fixtures} does not exist")
    plan = build_query_plan(
        _require(pool_cfg, "political_terms"),
        _require(pool_cfg, "topics"),
        int(_require(pool_cfg, "omega")),
    )
    client = MockPlatformClient.from_jsonl(fixtures)
    pool = run_pool(plan, client, date.fromisoformat(_require(pool_cfg, "pool_date")))
    save_pool_jsonl(pool, out / "pool.jsonl")
    print(f"pool: {len(pool.entries)} users -> {out / 'pool.jsonl'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# poll
# ---------------------------------------------------------------------------


def cmd_poll(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args.output)
    pool = load_pool_jsonl(args.pool)
    frame, quota = load_frame_csv(_require(cfg, "paths", "frame"))
    if quota is None:
        qcfg = _require(cfg, "quota")
        quota_frame = marginalize_frame(
            frame, [t for t in frame.attribute_schema if t != "state"]
        )
        quotas = sample_daughter_frame(
            quota_frame, int(_require(qcfg, "omega_star")), int(qcfg.get("seed", 0))
        )
    else:
        quotas = QuotaState(frame=frame, quota=quota)
    features = _features_from_config(cfg)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    oracle = _oracle_from_config(cfg, seed)
    fixtures = cfg.get("paths", {}).get("fixtures")
    client = (
        MockPlatformClient.from_jsonl(fixtures)
        if fixtures and Path(fixtures).exists()
        else MockPlatformClient([])
    )
    ledger_path = cfg.get("paths", {}).get("ledger")
    ledger = (
        ProcessingLedger.load_csv(ledger_path)
        if ledger_path and Path(ledger_path).exists()
        else ProcessingLedger()
    )
    fcfg = cfg.get("filters", {})
    settings = PollSettings(
        window_days=int(fcfg.get("window_days", 30)),
        m_politics=int(fcfg.get("m_politics", 20)),
        lam=float(fcfg.get("lambda", 2.0)),
        seed=seed,
        threads=args.threads or 1,
        poll_id=cfg.get("poll_id", "poll"),
        known_areas=tuple(cfg["model"]["areas"]) if "model" in cfg else (),
    )
    outcome = poll_users(pool, ledger, quotas, oracle, client, features, settings)
    save_responses_jsonl(outcome.responses, outcome.geo_by_user, out / "responses.jsonl")
    outcome.audit.save_jsonl(out / "audit.jsonl")
    with (out / "quota_report.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "quota", "filled"])
        for row in outcome.quota_report():
            writer.writerow([row["cell_id"], row["quota"], row["filled"]])
    run_report = {
        "pool_size": len(pool.entries),
        "responses": len(outcome.responses),
        "refusals": outcome.refusals,
        "quota_filled": outcome.quotas.filled_total(),
        "quota_target": outcome.quotas.target_total(),
    }
    (out / "poll_report.json").write_text(
        json.dumps(run_report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if ledger_path:
        ledger.save_csv(ledger_path)
    print(f"poll: {len(outcome.responses)} responses -> {out / 'responses.jsonl'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args.output)
    responses, states = load_responses_jsonl(args.responses)
    frame, _ = load_frame_csv(args.frame or _require(cfg, "paths", "frame"))
    model_cfg = _require(cfg, "model")
    spec = spec_from_config(model_cfg)
    choice_title = _require(model_cfg, "choice_title")

    spol = cfg.get("speculation", {})
    include_high = (
        args.include_speculative
        if args.include_speculative is not None
        else spol.get("include_high", True)
    )
    threshold = int(spol.get("threshold", 80))
    relevant = [choice_title] + [e.title for e in spec.effects]
    kept = responses
    if not include_high:
        kept = [
            r
            for r in responses
            if not is_highly_speculative(r, relevant, threshold=threshold)
        ]
    dropped = len(responses) - len(kept)

    data = build_training_data(kept, states, spec, choice_title)
    layout = ParamLayout(spec)
    mcfg = cfg.get("sampler", {})
    seed = args.seed if args.seed is not None else int(mcfg.get("seed", 0))
    settings = SamplerSettings(
        chains=int(mcfg.get("chains", 4)),
        iterations=int(mcfg.get("iterations", 1000)),
        warmup=int(mcfg.get("warmup", 500)),
        thin=int(mcfg.get("thin", 1)),
        max_tree_depth=int(mcfg.get("max_tree_depth", 10)),
        seed=seed,
    )
    draws = sample(make_logpost(data, spec, layout), layout.dim, settings)
    save_draws_csv(draws, layout, out / "draws.csv")
    save_diagnostics_json(draws, out / "diagnostics.json")

    probs = cell_probs(draws, frame, spec, layout)
    weights = np.array([c.weight for c in frame.cells])
    for level, title in [("national", None), ("state", "state")] + [
        ("crosstab_" + e.title, e.title) for e in spec.effects
    ]:
        labels, cmap = crosstab_partition(frame, title)
        post = poststratify(probs, weights, cmap)
        rows = summarize_estimates(labels, post, spec.choices)
        save_estimates_csv(rows, out / f"estimates_{level}.csv")
        if level == "state":
            ia = spec.choice_index(_require(model_cfg, "margin_choice_a"))
            ib = spec.choice_index(_require(model_cfg, "margin_choice_b"))
            margins = margin_draws(post, ia, ib)
            with (out / "state_margin_draws.csv").open(
                "w", encoding="utf-8", newline=""
            ) as fh:
                writer = csv.writer(fh)
                writer.writerow(labels)
                for d in range(margins.shape[0]):
                    writer.writerow([repr(float(v)) for v in margins[d]])

    infer_report = {
        "responses_total": len(responses),
        "responses_used": len(kept),
        "dropped_highly_speculative": dropped,
        "retained_draws": draws.n_draws,
        "divergences": draws.diagnostics.divergences,
        "warnings": draws.diagnostics.warnings(),
    }
    (out / "infer_report.json").write_text(
        json.dumps(infer_report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"infer: {draws.n_draws} draws, {dropped} speculative records dropped -> {out}"
    )
    if draws.diagnostics.warnings():
        for w in draws.diagnostics.warnings():
            print(f"warning: {w}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_results_csv(path: str | Path) -> tuple[dict, dict]:
    observed: dict[str, float] = {}
    previous: dict[str, float] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            observed[row["area"]] = float(row["observed"])
            if row.get("previous") not in (None, ""):
                previous[row["area"]] = float(row["previous"])
    return observed, previous


def _load_margin_draws_csv(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        labels = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    mat = np.array(rows)
    return {lab: mat[:, k] for k, lab in enumerate(labels)}


def cmd_eval(args) -> int:
    draws_by_area = _load_margin_draws_csv(args.estimates)
    observed, previous = _load_results_csv(args.results)
    estimates = [
        AreaEstimate(
            area=a,
            point=float(np.median(d)),
            lo=float(np.percentile(d, 5)),
            hi=float(np.percentile(d, 95)),
            draws=d,
        )
        for a, d in sorted(draws_by_area.items())
    ]
    report = metric_report(estimates, observed, previous=previous or None)
    out = Path(args.output or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if args.pollsters:
        pollsters = load_pollsters_csv(args.pollsters)
        rows = compare_pollsters(
            draws_by_area,
            pollsters,
            observed,
            choice_a=args.choice_a,
            choice_b=args.choice_b,
            seed=args.seed or 0,
        )
        save_comparison_csv(rows, out / "pollster_comparison.csv")
    print(f"eval: metrics -> {out / 'metrics.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _sim_configs(cfg: dict) -> tuple[PopulationConfig, SelectionConfig, PipelineConfig]:
    pcfg = _require(cfg, "population")
    pop = PopulationConfig(
        areas=tuple(_require(pcfg, "areas")),
        adjacency=tuple((int(i), int(j)) for i, j in _require(pcfg, "adjacency")),
        size=int(_require(pcfg, "size")),
        seed=int(pcfg.get("seed", 0)),
        **{
            k: pcfg[k]
            for k in (
                "attributes",
                "marginals",
                "choices",
                "reference_choice",
                "choice_coefs",
                "choice_base",
                "area_effect_sd",
                "area_attr_tilt",
            )
            if k in pcfg
        },
    )
    scfg = cfg.get("selection", {})
    sel = SelectionConfig(
        base_log_odds=float(scfg.get("base_log_odds", -2.2)),
        attr_log_odds=scfg.get("attr_log_odds", {}),
        political_base=float(scfg.get("political_base", -0.5)),
        attention_log_odds=scfg.get("attention_log_odds", {}),
        stateless_rate=float(scfg.get("stateless_rate", 0.0)),
        nonperson_rate=float(scfg.get("nonperson_rate", 0.0)),
    )
    icfg = cfg.get("pipeline", {})
    ocfg = icfg.get("oracle", {})
    pipe = PipelineConfig(
        sample_target=int(icfg.get("sample_target", 1000)),
        window_days=int(icfg.get("window_days", 30)),
        m_politics=int(icfg.get("m_politics", 3)),
        lam=float(icfg.get("lambda", 2.0)),
        oracle=OracleConfig(
            confusion=ocfg.get("confusion", {}),
            rejection_rate=ocfg.get("rejection_rate", 0.0),
            default_speculation=ocfg.get("default_speculation", 0.0),
            speculation_mean=ocfg.get("speculation_mean", {}),
            speculation_spread=ocfg.get("speculation_spread", {}),
            seed=int(ocfg.get("seed", 0)),
        ),
        chains=int(icfg.get("chains", 2)),
        iterations=int(icfg.get("iterations", 700)),
        warmup=int(icfg.get("warmup", 400)),
        thin=int(icfg.get("thin", 2)),
        max_tree_depth=int(icfg.get("max_tree_depth", 10)),
        use_state_covariates=bool(icfg.get("use_state_covariates", True)),
    )
    return pop, sel, pipe


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args.output)
    pop_cfg, sel_cfg, pipe_cfg = _sim_configs(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    report = run_end_to_end(pop_cfg, sel_cfg, pipe_cfg, seed=seed)
    (out / "sim_report.json").write_bytes(report_to_json_bytes(report))
    with (out / "sim_state_table.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area", "truth", "raw", "post_estimate", "post_lo", "post_hi"])
        for area, row in report["state"].items():
            writer.writerow(
                [
                    area,
                    repr(row["truth"]),
                    "" if row["raw"] is None else repr(row["raw"]),
                    repr(row["post_estimate"]),
                    repr(row["post_lo"]),
                    repr(row["post_hi"]),
                ]
            )
    print(
        "simulate: national truth {truth:.4f}, raw error {raw:+.4f}, "
        "post error {post:+.4f} -> {out}".format(
            truth=report["national"]["truth"],
            raw=report["national"]["raw_error"],
            post=report["national"]["post_error"],
            out=out / "sim_report.json",
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------


def _bool_flag(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracepoll",
        description="Unobtrusive social-media polling pipeline (desk-scale batch runner).",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override RNG seed")
        p.add_argument("--threads", type=int, default=None, help="worker pool size")
        p.add_argument("--output", default=None, help="output directory override")

    p = sub.add_parser("pool", help="acquire a subject pool from fixtures")
    common(p)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("poll", help="run the screening cascade and extraction")
    common(p)
    p.add_argument("--pool", required=True, help="pool JSONL from the pool command")
    p.set_defaults(func=cmd_poll)

    p = sub.add_parser("infer", help="fit the model and post-stratify")
    common(p)
    p.add_argument("--responses", required=True, help="responses JSONL")
    p.add_argument("--frame", default=None, help="stratification frame CSV")
    p.add_argument(
        "--include-speculative",
        type=_bool_flag,
        default=None,
        help="keep records with highly speculative relevant features",
    )
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score estimates against observed results")
    common(p)
    p.add_argument("--estimates", required=True, help="state margin draws CSV")
    p.add_argument("--results", required=True, help="observed results CSV")
    p.add_argument("--pollsters", default=None, help="pollster records CSV")
    p.add_argument("--choice-a", default="R")
    p.add_argument("--choice-b", default="D")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="ground-truth end-to-end simulation")
    common(p)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
