"""Command-line entry point.

Subcommands: ``gen-data`` (synthetic corpus + manifest), ``train``
(checkpoint + JSONL log on stdout), ``eval`` (metrics report JSON on
stdout), ``predict`` (PLY heatmap + JSON summary), ``gradcheck``
(finite-difference suites).

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 numeric divergence.  Set ``LMAD_THREADS`` (default 1) before launch to
let BLAS use more threads at the cost of bit-reproducibility.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, NonFiniteError

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _cmd_gen_data(args) -> int:
    from .dataset import build_manifest

    manifest = build_manifest(args.out, per_category=args.per_category,
                              n_points=args.points, seed=args.seed)
    print(json.dumps({"out": str(args.out), "samples": len(manifest.samples),
                      "splits": {k: len(v) for k, v in manifest.splits.items()}}))
    return EXIT_OK


def _cmd_train(args) -> int:
    from .train import RunConfig, run_training

    cfg_dict = {}
    if args.config:
        cfg_dict = json.loads(Path(args.config).read_text())
        if not isinstance(cfg_dict, dict):
            raise ConfigError(f"run config {args.config} must be a JSON object")
    overrides = {"manifest": args.manifest, "task": args.task, "head": args.head,
                 "seed": args.seed, "steps": args.steps, "epochs": args.epochs,
                 "lr": args.lr, "batch_size": args.batch_size,
                 "val_every": args.val_every, "preset": args.preset,
                 "negative_prob": args.negative_prob}
    if args.freeze_lm:
        overrides["freeze_lm"] = True
    cfg_dict.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig.from_dict(cfg_dict)
    if not cfg.manifest:
        raise ConfigError("no dataset manifest given (--manifest or config key)")
    log_file = open(args.log, "w") if args.log else None
    try:
        result = run_training(cfg, out_ckpt=args.out_ckpt, log_stream=sys.stdout)
        if log_file is not None:
            log_file.write("\n".join(result.log_lines) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .dataset import DatasetManifest
    from .metrics import evaluate_split

    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.load(manifest_path)
    model = None
    if not args.oracle:
        if not args.ckpt:
            raise ConfigError("--ckpt is required unless --oracle is given")
        from .checkpoint import load_model

        model = load_model(args.ckpt)
        missing = [w for w in manifest.affordances if w not in model.cfg.words]
        if missing:
            raise ConfigError(f"checkpoint vocabulary is missing words: {missing}")
    report = evaluate_split(model, manifest, manifest_path.parent, args.split,
                            task=args.task, oracle=args.oracle)
    print(json.dumps(report, sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_predict(args) -> int:
    from .afpc import read_sample
    from .checkpoint import load_model
    from .ply import write_ply

    sample = read_sample(args.sample)
    model = load_model(args.ckpt)
    if args.word not in model.cfg.words:
        print(f"warning: {args.word!r} is not in the model vocabulary; "
              f"querying the unknown-word token", file=sys.stderr)
    pred = model.predict(sample.coords, args.word)
    write_ply(args.out_ply, sample.coords, pred.probs)
    print(json.dumps({"positive_count": int(pred.labels.sum()),
                      "mean_prob": float(pred.probs.mean())}))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_model_checks, run_op_checks

    if args.scope == "ops":
        report = run_op_checks(seed=args.seed, instances=args.instances)
    else:
        report = run_model_checks(seed=args.seed)
    print(json.dumps(report, indent=2))
    if not report["passed"]:
        failed = [r["op"] for r in report["results"] if not r["passed"]]
        print(f"gradcheck FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmad",
                                     description="Language-queried point-cloud "
                                                 "affordance detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--per-category", type=int, default=100)
    g.add_argument("--points", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="run config JSON file")
    t.add_argument("--manifest", help="dataset manifest path")
    t.add_argument("--task", choices=("full", "partial"))
    t.add_argument("--head", choices=("aqm", "xattn", "cosine"))
    t.add_argument("--preset", choices=("desk", "micro", "paper", "custom"))
    t.add_argument("--out-ckpt", default="model.ckpt")
    t.add_argument("--log", help="also write the JSONL log to this file")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--val-every", type=int, dest="val_every")
    t.add_argument("--negative-prob", type=float, dest="negative_prob")
    t.add_argument("--freeze-lm", action="store_true", dest="freeze_lm")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--task", default="full", choices=("full", "partial"))
    e.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself (sanity check)")
    e.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("predict", help="predict one (sample, word) heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--word", required=True)
    p.add_argument("--out-ply", required=True)
    p.set_defaults(fn=_cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--scope", default="ops", choices=("ops", "model"))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=20)
    c.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NonFiniteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
