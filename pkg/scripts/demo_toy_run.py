#!/usr/bin/env python3
"""Run the whole pipeline end to end against the built-in synthetic gateway.

Writes a small hand-curated seed set and a config into --workdir, runs
every stage (seed-check, distill-heads, distill-tails, filter, stats,
export), draws a stratified evaluation sample, and prints where everything
landed. Pass --serve to start the annotation service on the finished
workspace; point a browser (or the bundled front end) at the printed URL.

No network access is needed: the synthetic gateway fabricates plausible
replies deterministically from the seeds and the rng seed.
"""
import argparse
import json
import sys
from pathlib import Path

import yaml

from ckdistill.cli import main as ckdistill

HEAD_SEEDS = {
    "voluntary": [
        "PersonX去超市买菜",
        "PersonX学做红烧肉",
        "PersonX约朋友看电影",
        "PersonX给家里打电话",
        "PersonX报名马拉松",
        "PersonX整理房间",
        "PersonX写年度总结",
        "PersonX骑车上班",
        "PersonX给绿植浇水",
        "PersonX预订火车票",
    ],
    "involuntary": [
        "PersonX感冒了",
        "PersonX被雨淋湿",
        "PersonX错过了末班车",
        "PersonX收到一份惊喜礼物",
        "PersonX的手机没电了",
        "PersonX在路上摔了一跤",
        "PersonX被蚊子咬醒",
        "PersonX弄丢了钥匙",
        "PersonX考试迟到",
        "PersonX被领导批评",
    ],
    "state": [
        "PersonX很困",
        "PersonX心情低落",
        "PersonX对花粉过敏",
        "PersonX精通三门外语",
        "PersonX是夜猫子",
        "PersonX近视很深",
        "PersonX容易紧张",
        "PersonX特别怕冷",
        "PersonX是素食者",
        "PersonX记性很好",
    ],
}

# (head, head_type, tail) per relation; four worked examples each.
TRIPLE_SEEDS = {
    "xWant": [
        ("PersonX熬夜加班", "voluntary", "想好好睡一觉"),
        ("PersonX跑完马拉松", "voluntary", "想喝水"),
        ("PersonX感冒了", "involuntary", "想去医院看病"),
        ("PersonX很无聊", "state", "想找点事做"),
    ],
    "xEffect": [
        ("PersonX吃得太饱", "voluntary", "胃有点不舒服"),
        ("PersonX淋了一场雨", "involuntary", "感冒了"),
        ("PersonX坚持锻炼", "voluntary", "身体变好了"),
        ("PersonX很粗心", "state", "经常丢三落四"),
    ],
    "xAttr": [
        ("PersonX主动让座", "voluntary", "有礼貌"),
        ("PersonX被吓了一跳", "involuntary", "胆子小"),
        ("PersonX精通书法", "state", "有艺术修养"),
        ("PersonX按时完成任务", "voluntary", "可靠"),
    ],
    "xReact": [
        ("PersonX中了奖", "involuntary", "很开心"),
        ("PersonX丢了钱包", "involuntary", "很沮丧"),
        ("PersonX完成了项目", "voluntary", "很有成就感"),
        ("PersonX见到老朋友", "voluntary", "很高兴"),
    ],
    "xNeed": [
        ("PersonX做晚饭", "voluntary", "先买食材"),
        ("PersonX出国旅行", "voluntary", "先办签证"),
        ("PersonX感冒了", "involuntary", "需要休息"),
        ("PersonX很困", "state", "需要睡觉"),
    ],
    "xIntent": [
        ("PersonX给朋友送花", "voluntary", "想表达祝福"),
        ("PersonX早起跑步", "voluntary", "想保持健康"),
        ("PersonX学习编程", "voluntary", "想换一份工作"),
        ("PersonX存钱", "voluntary", "想买房子"),
    ],
    "HinderedBy": [
        ("PersonX想出门散步", "voluntary", "外面下着大雨"),
        ("PersonX想专心看书", "voluntary", "邻居在装修"),
        ("PersonX困得睁不开眼", "involuntary", "手头的工作还没做完"),
        ("PersonX很想家", "state", "车票已经卖完了"),
    ],
}


def write_seeds(seeds_dir: Path) -> None:
    seeds_dir.mkdir(parents=True, exist_ok=True)
    with (seeds_dir / "head_seeds.jsonl").open("w", encoding="utf-8") as f:
        for kt, texts in HEAD_SEEDS.items():
            for text in texts:
                f.write(json.dumps({"text": text, "knowledge_type": kt}, ensure_ascii=False) + "\n")
    with (seeds_dir / "triple_seeds.jsonl").open("w", encoding="utf-8") as f:
        for rel, rows in TRIPLE_SEEDS.items():
            for head, head_type, tail in rows:
                row = {"head": head, "head_type": head_type, "relation": rel, "tail": tail}
                f.write(json.dumps(row, ensure_ascii=False) + "\n")


def write_config(workdir: Path, target_heads: int, rng_seed: int) -> Path:
    cfg = {
        "workspace": str(workdir / "workspace"),
        "gateway": {
            "mode": "synthetic",
            "model_id": "demo-model",
            "synthetic_seed": 1889,
            "max_concurrent": 4,
        },
        "plan": {
            "target_heads_per_type": target_heads,
            "seeds_per_type": 10,
            "triple_seeds_per_relation": 4,
            "rng_seed": rng_seed,
            "head_example_count": 6,
            "tail_example_count": 3,
            "tails_per_request": 4,
            "max_requests_per_stage": 2000,
        },
        "filter": {
            "judge_sample_n": 80,
            "holdout_fraction": 0.25,
            "epochs": 150,
        },
        "eval": {"per_stratum_n": 8},
        "assets": {
            "head_seeds": str(workdir / "seeds" / "head_seeds.jsonl"),
            "triple_seeds": str(workdir / "seeds" / "triple_seeds.jsonl"),
        },
    }
    path = workdir / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, allow_unicode=True, sort_keys=False), encoding="utf-8")
    return path


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, default=Path("demo-run"))
    ap.add_argument("--target-heads", type=int, default=12, help="heads to collect per knowledge type")
    ap.add_argument("--rng-seed", type=int, default=7)
    ap.add_argument("--serve", action="store_true", help="start the annotation service when done")
    ap.add_argument("--port", type=int, default=8321)
    args = ap.parse_args(argv)

    workdir = args.workdir.resolve()
    write_seeds(workdir / "seeds")
    cfg_path = write_config(workdir, args.target_heads, args.rng_seed)
    print(f"config: {cfg_path}")

    rc = ckdistill(["run-all", "-c", str(cfg_path)])
    if rc:
        return rc
    rc = ckdistill(["eval-sample", "-c", str(cfg_path)])
    if rc:
        return rc

    summary = json.loads((workdir / "workspace" / "runs" / "run-all-summary.json").read_text("utf-8"))
    stats = summary["stats"]
    print()
    print("edition  heads  tails  triples")
    for edition in ("raw", "high"):
        row = stats[edition]
        print(f"{edition:<8} {row['unique_heads']:>5}  {row['unique_tails']:>5}  {row['triples']:>7}")
    print(f"exports: {workdir / 'workspace' / 'exports'}")
    print(f"eval sample: {workdir / 'workspace' / 'eval' / 'sample.json'}")

    if args.serve:
        return ckdistill(["serve", "-c", str(cfg_path), "--port", str(args.port)])
    print(f"\nnext: ckdistill serve -c {cfg_path} --port {args.port}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
