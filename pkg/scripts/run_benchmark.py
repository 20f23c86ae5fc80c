#!/usr/bin/env python3
"""Head comparison on the synthetic benchmark: aqm vs xattn vs cosine.

Generates (or reuses) a 400-sample corpus, trains every head with the same
budget over several seeds, and reports per-head median test mIoU on the
full-shape and partial-view tasks.  Medians over seeds are the quantity to
compare — single runs are noisy at this scale.

    python3 scripts/run_benchmark.py --out /tmp/bench --seeds 0 1 2
"""

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from lmad.dataset import DatasetManifest, build_manifest
from lmad.metrics import evaluate_split
from lmad.train import RunConfig, run_training

HEADS = ("aqm", "xattn", "cosine")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="corpus + results directory")
    ap.add_argument("--per-category", type=int, default=100)
    ap.add_argument("--points", type=int, default=512)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest = DatasetManifest.load(manifest_path)
        print(f"reusing corpus at {out} ({len(manifest.samples)} samples)")
    else:
        manifest = build_manifest(out, per_category=args.per_category,
                                  n_points=args.points, seed=args.data_seed)
        print(f"generated {len(manifest.samples)} samples in {out}")

    results: dict[str, dict] = {}
    for head in HEADS:
        full_mious, partial_mious = [], []
        for seed in args.seeds:
            t0 = time.time()
            cfg = RunConfig(manifest=str(manifest_path), preset="desk", head=head,
                            lr=args.lr, steps=args.steps, batch_size=args.batch_size,
                            val_every=10 ** 9, seed=seed)
            run = run_training(cfg, out_ckpt=out / f"{head}_seed{seed}.ckpt")
            full = evaluate_split(run.model, manifest, out, "test")
            partial = evaluate_split(run.model, manifest, out, "test", task="partial")
            full_mious.append(full["miou"])
            partial_mious.append(partial["miou"])
            print(f"  {head} seed {seed}: test mIoU {full['miou']:.4f} "
                  f"(partial {partial['miou']:.4f}, acc {full['acc']:.4f}, "
                  f"{(time.time() - t0) / 60:.1f} min)")
        results[head] = {
            "test_miou_median": statistics.median(full_mious),
            "partial_miou_median": statistics.median(partial_mious),
            "test_miou_per_seed": full_mious,
            "partial_miou_per_seed": partial_mious,
        }

    print(json.dumps(results, indent=2))
    (out / "benchmark_results.json").write_text(json.dumps(results, indent=2) + "\n")
    med = {h: results[h]["test_miou_median"] for h in HEADS}
    print(f"median test mIoU: aqm {med['aqm']:.4f} | xattn {med['xattn']:.4f} "
          f"| cosine {med['cosine']:.4f}")
    return 0 if med["aqm"] > med["xattn"] and med["aqm"] > med["cosine"] else 1


if __name__ == "__main__":
    raise SystemExit(main())
