"""Command-line entry point: train, eval, ablate, gradcheck, gen-synthetic, sample-patches.

Exit codes: 0 ok, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import data, gradsuite, runner
from .errors import PSCRError, ValidationError
from .preprocessing import SamplerSpec, sample_patches

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _run_config(args) -> config_mod.RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, key in (("seed", "seed"), ("out", "out.dir"), ("manifest", "data.manifest"),
                      ("arm", "train.arm"), ("epochs", "train.epochs"), ("lr", "train.learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    return config_mod.build(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    run = runner.load_run_data(cfg)
    arm = runner.Arm(cfg["train.arm"])
    bundles, histories = runner.train_dims(cfg, run)
    out = Path(cfg["out.dir"])
    runner.write_train_outputs(out, cfg, run, bundles, histories, arm)
    for dim, hist in histories.items():
        print(f"{dim}: {len(hist)} epochs, loss {hist[0]:.6g} -> {hist[-1]:.6g}")
    print(f"checkpoint written to {out / runner.CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    report = runner.evaluate_run(args.checkpoint, manifest_path=args.eval_manifest, split=args.split,
                                 vote=runner.vote_config(cfg), batch_size=cfg["eval.batch_size"])
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval_report.csv")
    print(report.summary_table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    rows, failures = runner.run_ablation(cfg)
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    runner.write_ablation_csv(rows, out / "ablation.csv")
    table = runner.format_ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    if failures:
        print(f"{len(failures)} cell(s) failed: {', '.join(failures)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(args.seed or 0)
    print(gradsuite.format_report(results))
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    spec = data.SyntheticSpec(args.count, args.side, args.seed if args.seed is not None else 7,
                              args.score_fn, args.max_radius)
    out = Path(args.out or "synthetic")
    manifest = data.gen_synthetic(spec, out)
    print(f"wrote {len(manifest)} images and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_sample_patches(args) -> int:
    spec = SamplerSpec(config_mod.parse_ints(args.start_indices), args.window)
    image = data.load_image(args.image)
    patches = sample_patches(image, spec)
    out = Path(args.out or "patches")
    out.mkdir(parents=True, exist_ok=True)
    with (out / "offsets.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "row", "col", "file"])
        for k, (patch, (r, c)) in enumerate(zip(patches.patches, patches.origins)):
            name = f"patch_{k:03d}.ppm"
            data.write_ppm(out / name, patch)
            w.writerow([k, r, c, name])
    print(f"wrote {len(patches)} patches to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pscr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", help="flat key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train one model per score dimension")
    common(p)
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--arm", choices=[a.value for a in runner.Arm])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="multi-exemplar evaluation of a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--manifest", dest="eval_manifest",
                   help="score this manifest instead of the run's held-out split")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every cell of an ablation plan")
    common(p)
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and the pipeline")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-synthetic", help="write a seeded blur/noise-scored image set")
    common(p, with_config=False)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--score-fn", choices=["blur", "noise", "mixed"], default="blur")
    p.add_argument("--max-radius", type=int, default=5)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("sample-patches", help="dump sliding-window patches of one PPM image")
    p.add_argument("image")
    p.add_argument("--start-indices", required=True, help="comma-separated, e.g. 0,150,288")
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sample_patches)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PSCRError, ArithmeticError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
