import json
from pathlib import Path

import pytest

from ckdistill.schema import (
    HeadItem,
    KnowledgeType,
    RELATION_ORDER,
    Triple,
    get_relation,
)

FIXTURES = Path(__file__).parent / "fixtures"


def head(text: str, kt: str = "voluntary", origin: str = "distilled") -> HeadItem:
    return HeadItem(text, KnowledgeType.parse(kt), origin=origin)


def triple(head_text: str, rel: str, tail: str, kt: str = "voluntary", status=None) -> Triple:
    return Triple(head(head_text, kt), get_relation(rel), tail, filter_status=status)


def write_head_seeds(path: Path, per_type: int) -> Path:
    rows = [
        {"text": f"PersonX种子动作{kt}{i}", "knowledge_type": kt}
        for kt in ("voluntary", "involuntary", "state")
        for i in range(per_type)
    ]
    path.write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8"
    )
    return path


def write_triple_seeds(path: Path, per_relation: int) -> Path:
    rows = [
        {
            "head": f"PersonX样例事件{rel}{i}",
            "head_type": "voluntary",
            "relation": rel,
            "tail": f"样例尾巴{rel}{i}",
        }
        for rel in RELATION_ORDER
        for i in range(per_relation)
    ]
    path.write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8"
    )
    return path


def write_toy_config(
    tmp: Path,
    workspace: Path,
    *,
    mode: str = "synthetic",
    transcript: Path | None = None,
    heads_per_type_seed: int = 10,
    triples_per_relation_seed: int = 8,
    name: str = "config.yaml",
    **plan,
) -> Path:
    """A small but complete pipeline config on disk."""
    seeds = tmp / "seeds"
    seeds.mkdir(exist_ok=True)
    write_head_seeds(seeds / "head_seeds.jsonl", heads_per_type_seed)
    write_triple_seeds(seeds / "triple_seeds.jsonl", triples_per_relation_seed)
    plan_defaults = {
        "target_heads_per_type": 5,
        "seeds_per_type": heads_per_type_seed,
        "triple_seeds_per_relation": triples_per_relation_seed,
        "rng_seed": 11,
        "tails_per_request": 4,
        "max_requests_per_stage": 400,
        "head_example_count": min(10, heads_per_type_seed),
        "tail_example_count": min(8, triples_per_relation_seed),
    }
    plan_defaults.update(plan)
    cfg = {
        "workspace": str(workspace),
        "gateway": {
            "mode": mode,
            "synthetic_seed": 29,
            "model_id": "toy-model",
            "max_concurrent": 4,
            **({"transcript": str(transcript)} if transcript else {}),
        },
        "plan": plan_defaults,
        "filter": {
            "judge_sample_n": 30,
            "holdout_fraction": 0.25,
            "epochs": 80,
            "hash_size": 1024,
        },
        "eval": {"per_stratum_n": 2},
        "assets": {
            "head_seeds": str(seeds / "head_seeds.jsonl"),
            "triple_seeds": str(seeds / "triple_seeds.jsonl"),
        },
    }
    import yaml

    path = tmp / name
    path.write_text(yaml.safe_dump(cfg, allow_unicode=True), encoding="utf-8")
    return path


@pytest.fixture
def corpus_stats() -> dict:
    return json.loads((FIXTURES / "published_corpus_stats.json").read_text(encoding="utf-8"))
