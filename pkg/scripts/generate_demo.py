#!/usr/bin/env python3
"""Generate a fully offline demo workspace for the CLI.

Writes a tiny labeled dataset, a scripted model backend, a scripted guest
runner, and an engine config under the given directory, so that

    selfplay-vqa train --config <dir>/config.json --task demo
    selfplay-vqa eval  --config <dir>/config.json --task demo --split validation

run end to end with no network and no real models.
"""

import argparse
import json
from pathlib import Path


def write_dataset(root: Path, name: str, records):
    root.mkdir(parents=True, exist_ok=True)
    with (root / f"{name}.jsonl").open("w", encoding="utf-8") as fh:
        for record in records:
            image = f"{record['id']}.png"
            (root / image).touch()
            fh.write(json.dumps({
                "id": record["id"],
                "image": image,
                "question": record["question"],
                "answers": record["answers"],
            }, ensure_ascii=False) + "\n")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", nargs="?", default="demo")
    args = parser.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    train = [{"id": f"t{i}", "question": f"What is the value of bar {i}?", "answers": [str(10 + i)]}
             for i in range(12)]
    val = [{"id": f"v{i}", "question": f"What is the value of point {i}?", "answers": [str(30 + i)]}
           for i in range(6)]
    write_dataset(out / "data", "train", train)
    write_dataset(out / "data", "validation", val)

    backend_rules = []
    runner_rules = []
    for i, record in enumerate(train + val):
        marker = f"ans = read_value()  # {record['id']}"
        gold = record["answers"][0]
        # two of the training examples stay unsolved so pools are non-trivial
        reply_ok = not record["id"].startswith("t") or i % 6 != 5
        backend_rules.append({
            "match": {"question_contains": record["question"], "text_contains": "`execute()`"},
            "replies": [marker if reply_ok else f"raise_marker {record['id']}"],
        })
        backend_rules.append({
            "match": {"question_contains": record["question"], "text_contains": "Answer the question directly"},
            "replies": [gold],
        })
        runner_rules.append({"source": marker, "result": {"status": "ok", "answer": gold}})
        runner_rules.append({"source": f"raise_marker {record['id']}",
                             "result": {"status": "error", "error_type": "NameError",
                                        "error_trace": "NameError: name 'read_value' is not defined"}})
    backend_rules.append({"match": {"role": "judge"}, "replies": ["Final Choice: Answer 1: first"]})
    backend_rules.append({"match": {"text_contains": "Correct the"}, "replies": ["never fixed"]})
    runner_rules.append({"source": "never fixed", "result": {"status": "error", "error_type": "NameError",
                                                             "error_trace": "NameError: still missing"}})

    (out / "backend_script.json").write_text(json.dumps({"rules": backend_rules}, indent=1))
    (out / "runner_script.json").write_text(json.dumps({"rules": runner_rules}, indent=1))

    config = {
        "dataset_root": "data",
        "tasks": [{
            "name": "demo",
            "metric_kind": "relaxed_accuracy",
            "split_paths": {"train": "train.jsonl", "validation": "validation.jsonl"},
        }],
        "backends": [
            {"backend_id": "orch", "kind": "scripted", "script_path": "backend_script.json", "rate_limit": 1000},
            {"backend_id": "generalist", "kind": "scripted", "script_path": "backend_script.json", "rate_limit": 1000},
            {"backend_id": "specialist", "kind": "scripted", "script_path": "backend_script.json", "rate_limit": 1000},
        ],
        "orchestrator_backend": "orch",
        "judge_backend": "orch",
        "seeds": [
            {"kind": "pot"},
            {"kind": "tool_api", "tool_backend": "generalist"},
            {"kind": "tool_api", "tool_backend": "specialist"},
        ],
        "train": {"steps": 3, "shots_schedule": [0, 4, 8], "n_samples": 1,
                  "refinement_rounds": 1, "rng_seed": 0, "worker_parallelism": 1},
        "inference": {"strategy": "uniform_random", "k": 4,
                      "aggregators": ["majority", "judge", "oracle"], "direct_qa_pool_size": 6},
        "sandbox": {"runner": "scripted", "script_path": "runner_script.json", "wall_timeout": 10},
        "cache_dir": "cache",
        "run_dir": "runs/demo",
    }
    (out / "config.json").write_text(json.dumps(config, indent=1))
    print(f"demo workspace written to {out}/ (config: {out / 'config.json'})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
