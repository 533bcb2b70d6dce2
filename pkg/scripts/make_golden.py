"""Regenerate the bundled model and the golden files used by the test suite.

    python3 scripts/make_golden.py

Generates SynSal-v1 in a temporary directory, trains the toy CNN with the
bundled recipe, runs the default evaluation sweep and writes:

    src/implicit_saliency/assets/synsal_v1.isw
    tests/golden/synsal_v1_eval.csv
    tests/golden/implicit_eval0000_conv2.pgm
    tests/golden/golden.json

Nothing is written unless the directional checks hold on the new run.
"""
from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from implicit_saliency.dataset import generate_synsal_v1, load_split_arrays
from implicit_saliency.harness import blur_drops, report_to_csv, run_eval
from implicit_saliency.imaging import save_pgm
from implicit_saliency.model import (
    BUNDLED_RECIPE,
    TrainConfig,
    batch_accuracy,
    build_toy_cnn,
    model_digest,
    model_to_bytes,
    train,
)
from implicit_saliency.saliency import implicit_saliency

ROOT = Path(__file__).resolve().parents[1]
ASSET = ROOT / "src" / "implicit_saliency" / "assets" / "synsal_v1.isw"
GOLDEN = ROOT / "tests" / "golden"


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        train_split, eval_split = generate_synsal_v1(tmp)
        r = BUNDLED_RECIPE
        model = build_toy_cnn(train_split.class_count, r["init_seed"])
        model, train_acc = train(model, train_split, TrainConfig(r["epochs"], r["lr"], r["batch_size"], r["seed"]))
        eval_acc = batch_accuracy(model, *load_split_arrays(eval_split))
        report = run_eval(model, eval_split)
        first = eval_split.records[0]
        golden_map = implicit_saliency(model, first.load_image(), "conv2").values

    last = model.conv_layers[-1]
    means = {
        f"{m}/{metric}/r{radius}": report.mean(m, last, radius, metric)
        for m in ("implicit", "feedforward", "gradcam", "gbp")
        for metric in ("nss", "cc")
        for radius in (0, 3)
    }
    checks = {
        "train accuracy >= 0.90": train_acc >= 0.90,
        "eval accuracy >= 0.80": eval_acc >= 0.80,
        "NSS implicit > feedforward": means["implicit/nss/r0"] > means["feedforward/nss/r0"],
        "NSS implicit > 0": means["implicit/nss/r0"] > 0,
        "NSS implicit > gbp": means["implicit/nss/r0"] > means["gbp/nss/r0"],
        "CC implicit > gbp": means["implicit/cc/r0"] > means["gbp/cc/r0"],
        "NSS implicit at r=3 > 0": means["implicit/nss/r3"] > 0,
    }
    for name, ok in checks.items():
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
    for key, value in sorted(means.items()):
        print(f"     {key:<24}{value:.4f}")
    if not all(checks.values()):
        print("directional checks failed; golden files left untouched", file=sys.stderr)
        return 1

    ASSET.parent.mkdir(parents=True, exist_ok=True)
    GOLDEN.mkdir(parents=True, exist_ok=True)
    ASSET.write_bytes(model_to_bytes(model))
    (GOLDEN / "synsal_v1_eval.csv").write_text(report_to_csv(report), encoding="utf-8", newline="\n")
    save_pgm(golden_map, GOLDEN / "implicit_eval0000_conv2.pgm")
    drops = {f"{m}/{l}": d["nss_drop"] for (m, l), d in blur_drops(report, 3, 0).items()}
    summary = {
        "train_accuracy": train_acc,
        "eval_accuracy": eval_acc,
        "model_sha256": model_digest(model),
        "last_conv_means": means,
        "nss_drop_r0_r3": drops,
        "record_count": len(report.records),
        "degenerate_records": int(sum(rec.degenerate for rec in report.records)),
    }
    (GOLDEN / "golden.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {ASSET.relative_to(ROOT)} and {GOLDEN.relative_to(ROOT)}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
