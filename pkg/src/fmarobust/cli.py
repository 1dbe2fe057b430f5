"""Command-line interface.

Subcommands: train-baseline, calibrate, finetune, grid-search-gamma, eval,
run-grid, report, augment. Global flags (--seed, --data-dir, --out-dir,
--config) may also come from a key=value config file; explicit flags win.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import experiments as E
from . import model as M
from . import report as R
from . import train as TR
from .augment import (AugKind, AugmentationSet, combined_set, compose,
                      load_manifest, load_preset, load_presets, single_set)
from .calibrate import eval_accuracy
from .errors import (CalibrationError, ContractError, FormatError,
                     NumericError, ParameterError)
from .rng import RandomStream

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _parse_schedule(text: str):
    """'0.01:8,0.002:4' -> ((0.01, 8), (0.002, 4))."""
    try:
        stages = []
        for part in text.split(","):
            rate, count = part.split(":")
            stages.append((float(rate), int(count)))
        return tuple(stages)
    except ValueError as exc:
        raise ContractError(f"bad lr schedule {text!r}: {exc}") from exc


def _load_config_defaults(path: str) -> dict:
    if not os.path.exists(path):
        raise FormatError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"config line without '=': {line!r}")
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _specs_by_kind(path: str):
    named = load_manifest(path)
    return {spec.kind: spec for spec in named.values()}


def _scale_from_args(args) -> E.DeskScale:
    return E.DeskScale(
        train_per_class=args.train_per_class,
        val_per_class=args.val_per_class,
        baseline_epochs=args.baseline_epochs,
        finetune_epochs=args.epochs,
        data_seed=args.seed)


def build_parser() -> _Parser:
    parser = _Parser(prog="fmarobust",
                     description="Robustness finetuning toolkit")
    parser.add_argument("--version", action="version", version=__version__)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--data-dir", default=None,
                        help="CIFAR-10 binary dir; synthetic data when absent")
    common.add_argument("--out-dir", default="out")
    common.add_argument("--config", default=None,
                        help="key=value file mirroring the flags")
    common.add_argument("--train-per-class", type=int, default=500)
    common.add_argument("--val-per-class", type=int, default=100)
    common.add_argument("--batch-size", type=int, default=128)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-baseline", parents=[common],
                       help="stage 1: train on clean images")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr-schedule", default="0.01:8,0.002:4",
                   help="rate:epochs[,rate:epochs...]")
    p.add_argument("--momentum", type=float, default=0.9)

    p = sub.add_parser("calibrate", parents=[common],
                       help="search corruption strengths for a target drop")
    p.add_argument("--model", required=True)
    p.add_argument("--target-drop", type=float, default=0.10)
    p.add_argument("--tolerance", type=float, default=0.005)
    p.add_argument("--kinds", default=None,
                   help="comma list; default all seven")

    p = sub.add_parser("finetune", parents=[common],
                       help="stage 2: robustness finetuning")
    p.add_argument("--model", required=True)
    p.add_argument("--augs", required=True,
                   help="calibrated augmentation manifest")
    p.add_argument("--method", choices=["at", "st", "fma"], required=True)
    p.add_argument("--strategy", choices=["ia", "ca"], default="ca")
    p.add_argument("--ia-kind", default=None)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--st-weight", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--rate", type=float, default=TR.DEFAULT_FINETUNE_RATE)
    p.add_argument("--eval-subset", type=int, default=200)

    p = sub.add_parser("grid-search-gamma", parents=[common],
                       help="grid search the regularizer weight")
    p.add_argument("--model", required=True)
    p.add_argument("--augs", required=True)
    p.add_argument("--grid", default="0.01,0.1,1.0,10.0")
    p.add_argument("--param", choices=["gamma", "st_weight"], default="gamma")
    p.add_argument("--epochs", type=int, default=3)

    p = sub.add_parser("eval", parents=[common],
                       help="top-1 accuracy under a condition")
    p.add_argument("--model", required=True)
    p.add_argument("--augs", default=None)
    p.add_argument("--condition", default="clean",
                   help="clean, a corruption kind, combined_plus/minus")

    p = sub.add_parser("run-grid", parents=[common],
                       help="full experiment: baseline, calibration, "
                            "finetunes, metric grid")
    p.add_argument("--methods", default="at,st,fma")
    p.add_argument("--strategy", choices=["ca"], default="ca")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--baseline-epochs", type=int, default=12)

    p = sub.add_parser("report", parents=[common],
                       help="training curves (CSV+SVG) and sample images")
    p.add_argument("--run-manifest", required=True,
                   help="a finetune manifest.json with per-epoch metrics")
    p.add_argument("--augs", default=None,
                   help="manifest for the sample-image panel")

    p = sub.add_parser("augment", parents=[common],
                       help="corrupt one PNG image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--preset", default=None,
                   help="shipped preset name, e.g. cifar10/gaussian_noise")
    p.add_argument("--augs", default=None, help="manifest to read specs from")
    p.add_argument("--spec", default=None, help="spec name inside --augs")
    p.add_argument("--set", dest="combined", default=None,
                   choices=["combined_plus", "combined_minus"])
    return parser


def _apply_config_file(args) -> None:
    if not getattr(args, "config", None):
        return
    overrides = _load_config_defaults(args.config)
    explicit = {a.lstrip("-").replace("-", "_").split("=")[0]
                for a in sys.argv[1:] if a.startswith("--")}
    for key, raw in overrides.items():
        if not hasattr(args, key) or key in explicit:
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, key, value)


# ---------------------------------------------------------------------------
# command bodies


def cmd_train_baseline(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    scale = E.DeskScale(train_per_class=args.train_per_class,
                        val_per_class=args.val_per_class,
                        data_seed=args.seed)
    train, val = E.get_data(scale, args.data_dir)
    config = TR.TrainConfig(
        stage="baseline", epochs=args.epochs,
        lr_schedule=_parse_schedule(args.lr_schedule),
        momentum=args.momentum, batch_size=args.batch_size, seed=args.seed)
    model = M.init_model(E.EXPERIMENT_ARCH, seed=args.seed)
    best, manifest = TR.train_baseline(model, train, val, config,
                                       out_dir=args.out_dir)
    path = os.path.join(args.out_dir, "baseline.snap")
    M.save_file(best, path)
    print(f"baseline: best val accuracy "
          f"{manifest.final['best_val_clean_acc']:.4f} -> {path}")
    return 0


def cmd_calibrate(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    model = M.load_file(args.model)
    scale = E.DeskScale(train_per_class=args.train_per_class,
                        val_per_class=args.val_per_class,
                        target_drop=args.target_drop,
                        tolerance=args.tolerance,
                        data_seed=args.seed)
    _, val = E.get_data(scale, args.data_dir)
    from .calibrate import calibrate_all, specs_from_results
    from .augment import write_manifest
    kinds = None
    if args.kinds:
        kinds = [AugKind(k.strip()) for k in args.kinds.split(",")]
    results = calibrate_all(model, val, RandomStream(args.seed + 100),
                            target_drop=args.target_drop,
                            tolerance=args.tolerance, kinds=kinds)
    cfg_path = os.path.join(args.out_dir, "augmentations.cfg")
    write_manifest(specs_from_results(results), cfg_path)
    for kind, res in results.items():
        flag = "  [saturated]" if res.saturated else ""
        print(f"{kind.value:18s} knob={res.knob_value:9.5f} "
              f"drop={res.measured_drop:6.3f}{flag}")
    print(f"wrote {cfg_path}")
    return 0


def cmd_finetune(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    model = M.load_file(args.model)
    specs = _specs_by_kind(args.augs)
    scale = E.DeskScale(train_per_class=args.train_per_class,
                        val_per_class=args.val_per_class,
                        data_seed=args.seed)
    train, val = E.get_data(scale, args.data_dir)
    if args.strategy == "ca":
        strategy = E.ca_strategy(specs)
        tag = f"{args.method}_ca_seed{args.seed}"
    else:
        if not args.ia_kind:
            raise ContractError("--strategy ia requires --ia-kind")
        strategy = E.ia_strategy(specs, AugKind(args.ia_kind))
        tag = f"{args.method}_ia_{args.ia_kind}_seed{args.seed}"
    config = TR.finetune_config(
        args.method, strategy, epochs=args.epochs, rate=args.rate,
        seed=args.seed, gamma=args.gamma, st_weight=args.st_weight,
        batch_size=args.batch_size, eval_subset=args.eval_subset)
    tuned, manifest = TR.finetune(model, train, val, config,
                                  eval_specs=specs, out_dir=args.out_dir)
    path = os.path.join(args.out_dir, f"{tag}.snap")
    M.save_file(tuned, path)
    manifest.save(os.path.join(args.out_dir, f"{tag}_manifest.json"))
    print(f"finetuned {tag}: final clean accuracy "
          f"{manifest.final['val_clean_acc']:.4f} -> {path}")
    return 0


def cmd_grid_search(args) -> int:
    model = M.load_file(args.model)
    specs = _specs_by_kind(args.augs)
    scale = E.DeskScale(train_per_class=args.train_per_class,
                        val_per_class=args.val_per_class,
                        data_seed=args.seed)
    train, val = E.get_data(scale, args.data_dir)
    grid = [float(v) for v in args.grid.split(",")]
    method = "fma" if args.param == "gamma" else "st"
    config = TR.finetune_config(method, E.ca_strategy(specs),
                                epochs=args.epochs, seed=args.seed,
                                batch_size=args.batch_size)
    best, table = TR.grid_search(model, train, val, grid, config, specs,
                                 param=args.param)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, f"search_{args.param}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    for row in table["rows"]:
        print(f"{args.param}={row[args.param]:<8g} clean={row['clean_acc']:.4f} "
              f"mean_aug={row['mean_aug_acc']:.4f} feasible={row['feasible']}")
    print(f"best {args.param}: {best}")
    return 0


def cmd_eval(args) -> int:
    model = M.load_file(args.model)
    scale = E.DeskScale(train_per_class=args.train_per_class,
                        val_per_class=args.val_per_class,
                        data_seed=args.seed)
    _, val = E.get_data(scale, args.data_dir)
    cond = args.condition
    if cond == "clean":
        aug = None
    else:
        if not args.augs:
            raise ContractError(f"condition {cond!r} needs --augs")
        specs = _specs_by_kind(args.augs)
        if cond == "combined_plus":
            aug = combined_set(True, specs)
        elif cond == "combined_minus":
            aug = combined_set(False, specs)
        else:
            aug = single_set(specs[AugKind(cond)])
    acc = eval_accuracy(model, val, aug, RandomStream(args.seed + 2000))
    print(f"{cond}: {acc:.4f}")
    return 0


def cmd_run_grid(args) -> int:
    methods = tuple(m.strip() for m in args.methods.split(","))
    for m in methods:
        if m not in E.METHOD_TAGS:
            raise ContractError(f"unknown method {m!r}")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    scale = E.DeskScale(train_per_class=args.train_per_class,
                        val_per_class=args.val_per_class,
                        baseline_epochs=args.baseline_epochs,
                        finetune_epochs=args.epochs,
                        batch_size=args.batch_size,
                        data_seed=args.seed)
    out = E.run_ca_grid(args.out_dir, scale, data_dir=args.data_dir,
                        methods=methods, seeds=seeds)
    grid = out["grids"][seeds[0]]
    print(grid.to_csv())
    print("mean average improvement over seeds:")
    for name, value in out["summary"]["mean_average_improvement"].items():
        print(f"  {name}: {100 * value:+.2f}%")
    print(f"artifacts in {args.out_dir}")
    return 0


def cmd_report(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = TR.RunManifest.load(args.run_manifest)
    if not manifest.epochs:
        raise FormatError(f"{args.run_manifest}: no per-epoch metrics")
    series = R.curves_from_manifest(manifest.epochs)
    csv_path = os.path.join(args.out_dir, "curves.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(R.curves_to_csv(series))
    svg_path = os.path.join(args.out_dir, "curves.svg")
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(R.render_line_chart(series,
                                     "validation accuracy during finetuning"))
    written = [csv_path, svg_path]

    if args.augs:
        named = load_manifest(args.augs)
        scale = E.DeskScale(train_per_class=args.train_per_class,
                            val_per_class=args.val_per_class,
                            data_seed=args.seed)
        _, val = E.get_data(scale, args.data_dir)
        specs_by_kind = {spec.kind: spec for spec in named.values()}
        sets = {"combined_plus": combined_set(True, specs_by_kind),
                "combined_minus": combined_set(False, specs_by_kind)}
        written += R.write_sample_images(
            val.images[0], named, os.path.join(args.out_dir, "samples"),
            seed=args.seed, sets=sets)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_augment(args) -> int:
    img = R.png_to_image(args.input)
    rng = RandomStream(args.seed)
    if args.preset:
        aug = single_set(load_preset(args.preset))
    elif args.combined:
        if args.augs:
            specs = _specs_by_kind(args.augs)
        else:
            specs = {s.kind: s for n, s in load_presets().items()
                     if n.startswith("cifar10/")}
        aug = combined_set(args.combined == "combined_plus", specs)
    elif args.augs and args.spec:
        aug = single_set(load_manifest(args.augs)[args.spec])
    else:
        raise ContractError(
            "augment needs --preset, --set, or --augs with --spec")
    out = compose(img, aug, rng)
    R.image_to_png(out, args.output)
    print(f"wrote {args.output}")
    return 0


_COMMANDS = {
    "train-baseline": cmd_train_baseline,
    "calibrate": cmd_calibrate,
    "finetune": cmd_finetune,
    "grid-search-gamma": cmd_grid_search,
    "eval": cmd_eval,
    "run-grid": cmd_run_grid,
    "report": cmd_report,
    "augment": cmd_augment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except (FormatError, ParameterError, ContractError, OSError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (NumericError, CalibrationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
