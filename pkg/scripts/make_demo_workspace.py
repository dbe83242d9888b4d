#!/usr/bin/env python3
"""Write a self-contained demo workspace for the CLI.

Creates platform fixtures (mock search results + timelines), a quota frame, a
post-stratification frame, and a run config, so the whole chain can be driven
from the shell:

    python scripts/make_demo_workspace.py --out demo
    tracepoll pool --config demo/config.json
    tracepoll poll --config demo/config.json --pool demo/out/pool.jsonl
    tracepoll infer --config demo/config.json \
        --responses demo/out/responses.jsonl --frame demo/model_frame.csv
"""

import argparse
import json
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from tracepoll.domain import (
    QueryKind,
    StratCell,
    StratFrame,
    TweetRecord,
    UserRecord,
    feature_def_to_dict,
    save_frame_csv,
)
from tracepoll.pool import user_to_dict
from tracepoll.simharness import feature_defs_from_attributes

ATTRS = {
    "sex": ("male", "female"),
    "age": ("18-34", "35-64", "65+"),
    "vote2020": ("prev-d", "prev-r", "stayed-home"),
}
AREAS = ("north", "south", "east", "west")
CHOICES = ("D", "R", "other")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("demo"))
    parser.add_argument("--users", type=int, default=400)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    t0 = datetime(2024, 10, 20, tzinfo=timezone.utc)

    rows = []
    for i in range(args.users):
        uid = f"demo{i:04d}"
        attrs = {t: cats[rng.integers(0, len(cats))] for t, cats in ATTRS.items()}
        lean_r = attrs["vote2020"] == "prev-r"
        vote = CHOICES[
            rng.choice(3, p=[0.15, 0.7, 0.15] if lean_r else [0.65, 0.2, 0.15])
        ]
        attrs["vote2024"] = vote
        user = UserRecord(
            user_id=uid,
            username=uid,
            display_name=f"Demo User {i}",
            description="; ".join(f"{t}: {c}" for t, c in attrs.items()),
            location_raw=AREAS[int(rng.integers(0, len(AREAS)))],
            profile_image_ref=None,
            captured_at=t0,
            capture_query_kind=QueryKind.POLITICAL if i % 2 == 0 else QueryKind.TRENDING,
        )
        row = user_to_dict(
            user,
            [TweetRecord(f"{uid}-t0", uid, t0 - timedelta(hours=2), "campaign chatter")],
        )
        row["query"] = "election talk" if i % 2 == 0 else "trending now"
        row["timeline"] = [
            {
                "tweet_id": f"{uid}-h{k}",
                "author_id": uid,
                "created_at": (t0 - timedelta(days=k + 1)).strftime("%Y-%m-%dT%H:%M:%S%z"),
                "text": f"older post {k}",
            }
            for k in range(4)
        ]
        rows.append(row)
    with (out / "fixtures.jsonl").open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    # quota frame over the three screened attributes, equal-ish weights
    cells, cid = [], 0
    for sex in ATTRS["sex"]:
        for age in ATTRS["age"]:
            for v20 in ATTRS["vote2020"]:
                cid += 1
                cells.append(
                    StratCell(cid, {"sex": sex, "age": age, "vote2020": v20}, 10.0)
                )
    quota_frame = StratFrame(
        cells=tuple(cells), attribute_schema=("sex", "age", "vote2020")
    )
    save_frame_csv(quota_frame, out / "frame.csv", quota={c.cell_id: 8 for c in cells})

    # model frame adds the area dimension
    cells, cid = [], 0
    for area in AREAS:
        for sex in ATTRS["sex"]:
            for age in ATTRS["age"]:
                for v20 in ATTRS["vote2020"]:
                    cid += 1
                    cells.append(
                        StratCell(
                            cid,
                            {"state": area, "sex": sex, "age": age, "vote2020": v20},
                            float(rng.integers(50, 200)),
                        )
                    )
    model_frame = StratFrame(
        cells=tuple(cells), attribute_schema=("state", "sex", "age", "vote2020")
    )
    save_frame_csv(model_frame, out / "model_frame.csv")

    features = feature_defs_from_attributes(ATTRS)
    features += feature_defs_from_attributes({"vote2024": CHOICES})
    config = {
        "paths": {
            "fixtures": str(out / "fixtures.jsonl"),
            "frame": str(out / "frame.csv"),
            "output_dir": str(out / "out"),
        },
        "pool": {
            "political_terms": "election talk",
            "topics": ["trending now"],
            "omega": 300,
            "pool_date": "2024-10-20",
        },
        "filters": {"window_days": 30, "m_politics": 3, "lambda": 2.0},
        "features": [feature_def_to_dict(f) for f in features],
        "model": {
            "choices": list(CHOICES),
            "reference": "D",
            "areas": list(AREAS),
            "edges": [[0, 1], [1, 2], [2, 3], [3, 0]],
            "effects": [
                {"title": "sex", "levels": list(ATTRS["sex"]), "structure": "unstructured"},
                {"title": "age", "levels": list(ATTRS["age"]), "structure": "random_walk"},
                {"title": "vote2020", "levels": list(ATTRS["vote2020"]), "structure": "unstructured"},
            ],
            "choice_title": "vote2024",
            "margin_choice_a": "R",
            "margin_choice_b": "D",
        },
        "sampler": {"chains": 2, "iterations": 600, "warmup": 350, "thin": 2, "seed": 1},
        "speculation": {"include_high": True, "threshold": 80},
        "seed": 1,
    }
    (out / "config.json").write_text(json.dumps(config, indent=2), encoding="utf-8")
    print(f"demo workspace -> {out}/ ({args.users} fixture users)")


if __name__ == "__main__":
    main()
