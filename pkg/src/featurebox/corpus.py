"""Deterministic synthetic corpus: views, basic features, dict, config.

The generated data deliberately exercises every messy path the cleaning
stage handles: null strings and ints, out-of-range ages, malformed JSON
blobs, missing JSON paths, side-view rows with no match, and u64 feature
signs stored two's-complement-wrapped in Int64 columns.  The same seed
must reproduce byte-identical files.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from .columnstore import ColumnBatch, Kind, wrap_u64, write_view
from .featureops import MASK64, fnv1a64

GOLDEN = 0x9E3779B97F4A7C15  # odd, so i -> id is a bijection over u64

CITIES = (
    "tokyo",
    "osaka",
    "kyoto",
    "sapporo",
    "nagoya",
    "fukuoka",
    "sendai",
    "hiroshima",
    "kobe",
    "yokohama",
    "unknown",
)

_BROKEN_JSON = (
    '{"u": {"city": "par',
    '{"u": [',
    "not json{",
    "{,}",
)


def instance_id_of(i: int) -> int:
    """The i-th instance id as a u64; distinct for every i."""
    return (GOLDEN * (i + 1)) & MASK64


def _basic_sign(instance_id: int, tag: bytes) -> int:
    return fnv1a64(instance_id.to_bytes(8, "little") + tag)


def _driver_batch(rows: int, users: int, rng: random.Random) -> ColumnBatch:
    vocab = (
        "shoes", "running", "coffee", "beans", "noise", "cancelling",
        "headphones", "mechanical", "keyboard", "standing", "desk",
        "espresso", "grinder", "trail", "gravel", "bike",
    )
    ids, labels, user_ids, queries, metas, ages = [], [], [], [], [], []
    for i in range(rows):
        ids.append(wrap_u64(instance_id_of(i)))
        labels.append(1 if rng.random() < 0.3 else 0)
        user_ids.append(rng.randrange(users))
        if rng.random() < 0.05:
            queries.append(None)
        else:
            queries.append(" ".join(rng.sample(vocab, rng.randint(1, 4))))
        r = rng.random()
        if r < 0.02:
            metas.append(rng.choice(_BROKEN_JSON))
        elif r < 0.05:
            metas.append(None)
        elif r < 0.15:
            metas.append(json.dumps({"src": rng.choice(("app", "web"))}))
        else:
            metas.append(
                json.dumps(
                    {
                        "u": {"city": rng.choice(CITIES), "tier": rng.randint(0, 3)},
                        "src": rng.choice(("app", "web")),
                    }
                )
            )
        r = rng.random()
        if r < 0.10:
            ages.append(None)
        elif r < 0.15:
            ages.append(rng.randint(121, 190))
        else:
            ages.append(rng.randint(18, 90))
    return ColumnBatch.from_pydict(
        [
            ("instance_id", Kind.INT64),
            ("label", Kind.INT64),
            ("user_id", Kind.INT64),
            ("query", Kind.UTF8),
            ("meta", Kind.JSON),
            ("age", Kind.INT64),
        ],
        {
            "instance_id": ids,
            "label": labels,
            "user_id": user_ids,
            "query": queries,
            "meta": metas,
            "age": ages,
        },
        key_columns=("user_id",),
    )


def _profile_batch(users: int, rng: random.Random) -> ColumnBatch:
    user_ids, cities, scores = [], [], []
    for u in range(users):
        if rng.random() < 0.03:
            continue  # users with no profile: their events fall out of the join
        user_ids.append(u)
        cities.append(None if rng.random() < 0.04 else rng.choice(CITIES))
        scores.append(None if rng.random() < 0.10 else rng.uniform(0.0, 1.0))
    return ColumnBatch.from_pydict(
        [("user_id", Kind.INT64), ("city", Kind.UTF8), ("score", Kind.FLOAT32)],
        {"user_id": user_ids, "city": cities, "score": scores},
        key_columns=("user_id",),
    )


def _basic_batch(rows: int, rng: random.Random) -> ColumnBatch:
    ids, a, b, payload = [], [], [], []
    for i in range(rows):
        instance = instance_id_of(i)
        ids.append(wrap_u64(instance))
        a.append(wrap_u64(_basic_sign(instance, b"a")))
        b.append(wrap_u64(_basic_sign(instance, b"b")))
        payload.append(rng.uniform(-1.0, 1.0))
    return ColumnBatch.from_pydict(
        [
            ("instance_id", Kind.INT64),
            ("basic_a", Kind.INT64),
            ("basic_b", Kind.INT64),
            ("payload", Kind.FLOAT32),
        ],
        {"instance_id": ids, "basic_a": a, "basic_b": b, "payload": payload},
        key_columns=("instance_id",),
    )


def config_dict(batch_size: int = 512, views: int = 2) -> dict:
    """The pipeline config matching the generated corpus, as plain data.

    ``views=2`` is the full shape (driver + profile side view, dict-table
    lookup placed on the host); ``views=1`` drops the side view, leaving a
    three-stage pipeline (clean, extract, merge — no join stage).
    """
    view_list = [
        {
            "name": "user_events",
            "path": "user_events.fbxc",
            "clean": {
                "fills": {"age": 0, "query": ""},
                "extract": [
                    {
                        "source": "meta",
                        "path": "u.city",
                        "output": "city_x",
                        "kind": "utf8",
                    }
                ],
                "filter": "age <= 120",
            },
        }
    ]
    operators = [
        {
            "name": "q_sig",
            "inputs": ["query"],
            "outputs": ["q_sig"],
            "pre": [{"fn": "token: :0"}],
            "body": {"fn": "hash:11"},
        },
        {
            "name": "cross_sig",
            "inputs": ["query", "city_x"],
            "outputs": ["cross_sig", "cross_fold"],
            "body": {"fn": "hash:13"},
            "post": [{"fn": "mix"}, {"fn": "fold"}],
        },
    ]
    features = {
        "q_sig": 11,
        "cross_sig": 13,
        "cross_fold": 15,
        "basic_a": 40,
        "basic_b": 41,
    }
    config = {
        "driver": "user_events",
        "views": view_list,
        "basic": {"path": "basic.fbxc"},
        "tables": {},
        "operators": operators,
        "emit": {"features": features},
        "batch_size": batch_size,
        "staging_dir": "staging",
        "device": {"budget_bytes": 64 << 10, "pool_bytes": 8 << 20},
    }
    if views == 2:
        view_list.append(
            {
                "name": "user_profile",
                "path": "user_profile.fbxc",
                "clean": {"fills": {"city": "unknown"}},
            }
        )
        config["join"] = {"keys": ["user_id"]}
        config["tables"] = {"city_dict": {"path": "city_dict.tsv", "default": 0}}
        operators.insert(
            1,
            {
                "name": "city_sig",
                "inputs": ["city"],
                "outputs": ["city_sig"],
                "pre": [
                    {
                        "fn": "lookup:city_dict",
                        "footprint_bytes": 1 << 20,
                        "kind": "memory-bound",
                    }
                ],
                "body": {"fn": "hash:12"},
            },
        )
        features["city_sig"] = 12
    return config


def gen_corpus(
    dest: str | Path,
    rows: int = 20_000,
    users: int = 2_000,
    seed: int = 7,
    batch_size: int = 512,
    views: int = 2,
) -> dict[str, Path]:
    """Write the corpus files under ``dest`` and return their paths."""
    if rows < 0 or users < 1:
        raise ValueError("rows must be >= 0 and users >= 1")
    if views not in (1, 2):
        raise ValueError("views must be 1 or 2")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)

    paths = {
        "user_events": dest / "user_events.fbxc",
        "basic": dest / "basic.fbxc",
        "config": dest / "pipeline.json",
    }
    write_view(_driver_batch(rows, users, rng), paths["user_events"])
    if views == 2:
        paths["user_profile"] = dest / "user_profile.fbxc"
        write_view(_profile_batch(users, rng), paths["user_profile"])
    write_view(_basic_batch(rows, rng), paths["basic"])

    if views == 2:
        paths["city_dict"] = dest / "city_dict.tsv"
        lines = [f"{city}\t{fnv1a64(city.encode('utf-8'))}" for city in CITIES]
        paths["city_dict"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    paths["config"].write_text(
        json.dumps(config_dict(batch_size, views), indent=2) + "\n",
        encoding="utf-8",
    )
    return paths
