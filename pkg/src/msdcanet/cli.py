"""Command-line entry point.

Commands: synth, train, eval, predict, compare, stats, bench, gradcheck,
gradcam, robustness, ablate. Run `msdcanet <cmd> -h` for flags.

Configuration is a flat INI file ([model] / [train] sections) that
command-line flags override; every run echoes its fully resolved
configuration, defaults and seed included, to `<out>/resolved-config.ini`
before doing any work, so a run is reproducible from that file alone.

Exit codes: 0 success, 1 validation/config error, 2 numeric failure
(NaN or gradient-check failure), 3 IO error. MSDCA_THREADS caps BLAS
parallelism (default 1, the serial-deterministic mode).
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import analysis, data, gradcheck, metrics, network, ops, trainer
from .data import PairingError
from .network import CheckpointFormatError
from .tensor import NumericError, Tensor

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _model_config_from(section, args) -> network.ModelConfig:
    """Resolve a ModelConfig from defaults <- config file <- flags."""
    values: dict = {}
    if section is not None:
        if "variant" in section:
            values["variant"] = section["variant"]
        for key in ("channels", "dilation_rates", "shift_offsets"):
            if key in section:
                values[key] = _parse_int_tuple(section[key])
        if "tok_mlp_stages" in section:
            values["tok_mlp_stages"] = frozenset(_parse_int_tuple(section["tok_mlp_stages"]))
        for key in ("in_channels", "out_classes"):
            if key in section:
                values[key] = section.getint(key)
        for key in ("dc_blocks", "res_aspp", "attention_gates"):
            if key in section:
                values[key] = section.getboolean(key)
    if getattr(args, "variant", None):
        values["variant"] = args.variant
    if getattr(args, "in_channels", None):
        values["in_channels"] = args.in_channels

    variant = values.get("variant", "custom")
    if variant in network.VARIANT_CHANNELS and "channels" not in values:
        values["channels"] = network.VARIANT_CHANNELS[variant]
    cfg = network.ModelConfig(**values)
    return cfg.validate()


def _train_config_from(section, args) -> trainer.TrainConfig:
    values: dict = {}
    if section is not None:
        for key, getter in (("lr", section.getfloat), ("batch_size", section.getint),
                            ("epochs", section.getint), ("seed", section.getint),
                            ("bce_weight", section.getfloat), ("dice_weight", section.getfloat),
                            ("beta1", section.getfloat), ("beta2", section.getfloat),
                            ("eps", section.getfloat), ("val_every", section.getint)):
            if key in section:
                values[key] = getter(key)
    for key in ("lr", "batch_size", "epochs", "seed", "val_every"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return trainer.TrainConfig(**values).validate()


def _read_config_file(path):
    if path is None:
        return None
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file {path} not found")
    return parser


def _echo_resolved(out_dir: Path, seed: int, model_cfg=None, train_cfg=None, extra=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(seed)}
    if extra:
        for k, v in extra.items():
            parser["run"][k] = str(v)
    if model_cfg is not None:
        d = asdict(model_cfg)
        d["tok_mlp_stages"] = " ".join(str(s) for s in sorted(model_cfg.tok_mlp_stages))
        d["channels"] = " ".join(map(str, model_cfg.channels))
        d["dilation_rates"] = " ".join(map(str, model_cfg.dilation_rates))
        d["shift_offsets"] = " ".join(map(str, model_cfg.shift_offsets))
        parser["model"] = {k: str(v) for k, v in d.items()}
    if train_cfg is not None:
        d = asdict(train_cfg)
        d.pop("checkpoint_dir", None)
        parser["train"] = {k: str(v) for k, v in d.items() if v is not None}
    with open(out_dir / "resolved-config.ini", "w") as f:
        parser.write(f)


def _load_eval_dataset(path, split="test"):
    ds = data.load_dataset(path, split=split)
    if len(ds) == 0:
        raise PairingError(f"no samples found under {path}")
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists and is not empty; use --force to overwrite")
    ds = data.synth_blobs(args.n, args.size, args.seed)
    _echo_resolved(out, args.seed, extra={"command": "synth", "n": args.n, "size": args.size})
    data.save_dataset(ds, out, force=True)
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    parser = _read_config_file(args.config)
    model_cfg = _model_config_from(parser["model"] if parser and parser.has_section("model") else None, args)
    train_cfg = _train_config_from(parser["train"] if parser and parser.has_section("train") else None, args)
    out = Path(args.out)
    train_cfg = replace(train_cfg, checkpoint_dir=str(out))

    full = _load_eval_dataset(args.data, split="train")
    if args.val_data:
        train_ds, val_ds = full, _load_eval_dataset(args.val_data, split="val")
    else:
        n_val = max(1, round(len(full) * args.val_frac))
        if n_val >= len(full):
            raise ValueError(f"validation fraction {args.val_frac} leaves no training data")
        train_ds, val_ds = full.split_at(len(full) - n_val)

    if args.augment_rotation:
        extra = [data.random_rotation(s, args.augment_rotation, train_cfg.seed)
                 for s in train_ds]
        for s in extra:
            s.id = f"{s.id}-rot"
        train_ds = data.Dataset(list(train_ds) + extra, split="train", source=train_ds.source)

    sample = train_ds[0]
    if sample.image.shape[0] != model_cfg.in_channels:
        model_cfg = replace(model_cfg, in_channels=sample.image.shape[0])
    _echo_resolved(out, train_cfg.seed, model_cfg, train_cfg,
                   extra={"command": "train", "data": args.data,
                          "n_train": len(train_ds), "n_val": len(val_ds)})
    model = network.build_msdcanet(model_cfg, seed=train_cfg.seed)

    def log(rec):
        miou = "" if rec.val_miou is None else f"  val_miou={rec.val_miou:.4f}"
        print(f"epoch {rec.epoch:3d}  loss={rec.train_loss:.5f}{miou}", flush=True)

    result = trainer.train(model, train_ds, val_ds, train_cfg, log=log)
    print(f"best val MIoU {result.best_miou:.4f} at epoch {result.best_epoch} "
          f"({result.steps} steps, {result.seconds:.1f}s); checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = network.load_checkpoint(args.ckpt)
    ds = _load_eval_dataset(args.data)
    out = Path(args.out)
    _echo_resolved(out, args.seed, extra={"command": "eval", "ckpt": args.ckpt, "data": args.data})
    report = metrics.batch_evaluate(model, ds, threshold=args.threshold)
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    agg = report.aggregates
    print(json.dumps(agg, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = network.load_checkpoint(args.ckpt)
    image = data._load_image(Path(args.image))
    x = Tensor(image[None])
    logits = model.forward(x, training=False)
    prob = ops.sigmoid(logits).data[0, 0]
    mask = (prob >= args.threshold).astype(np.uint8) * 255
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask, mode="L").save(out)
    print(f"wrote mask {out} ({int((mask > 0).sum())} foreground px)")
    if args.prob_out:
        Image.fromarray(np.clip(np.rint(prob * 255), 0, 255).astype(np.uint8), mode="L").save(args.prob_out)
        print(f"wrote probabilities {args.prob_out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    model_a, _ = network.load_checkpoint(args.ckpt_a)
    model_b, _ = network.load_checkpoint(args.ckpt_b)
    ds = _load_eval_dataset(args.data)
    rep_a = metrics.batch_evaluate(model_a, ds)
    rep_b = metrics.batch_evaluate(model_b, ds)
    ids_a = rep_a.column("id")
    ids_b = rep_b.column("id")
    if ids_a != ids_b:
        raise ValueError("the two models were evaluated on different image sets")
    result = metrics.paired_t_test(rep_a.column("miou"), rep_b.column("miou"))
    print(f"n pairs: {result.n}")
    print(f"mean MIoU A: {np.mean(rep_a.column('miou')):.4f}")
    print(f"mean MIoU B: {np.mean(rep_b.column('miou')):.4f}")
    print(f"t = {result.t:.4f}  p = {result.p:.6f}  grade: {result.grade}")
    if result.degenerate_variance:
        print("note: zero variance of differences with nonzero mean (degenerate)")
    return EXIT_OK


def _model_from_args(args):
    if getattr(args, "ckpt", None):
        model, _ = network.load_checkpoint(args.ckpt)
        return model
    if getattr(args, "variant", None):
        cfg = network.variant_config(args.variant, in_channels=args.in_channels or 1)
        return network.build_msdcanet(cfg, seed=args.seed)
    raise ValueError("need --ckpt or --variant")


def cmd_stats(args) -> int:
    model = _model_from_args(args)
    shape = _parse_int_tuple(args.input_shape)
    counts = network.count_params(model)
    flops = network.estimate_flops(model, shape)
    print(f"parameters: {counts['count']:,}  ({counts['megabytes']:.3f} MB at 4 bytes/weight)")
    variant = getattr(model, "cfg", None) and model.cfg.variant
    if variant in network.VARIANT_REFERENCE_MB:
        ref = network.VARIANT_REFERENCE_MB[variant]
        print(f"nominal size for preset {variant}: {ref:.2f} MB "
              f"(delta {100 * (counts['megabytes'] - ref) / ref:+.1f}%; wide tolerance documented)")
    print(f"forward cost at {tuple(shape)}: {flops['gflops']:.4f} GFLOPs")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _model_from_args(args)
    shape = _parse_int_tuple(args.input_shape)
    result = analysis.fps_benchmark(model, shape, n_iters=args.iters, warmup=args.warmup)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed, include_blocks=not args.ops_only)
    if args.module:
        results = [r for r in results if args.module in r[0]]
        if not results:
            raise ValueError(f"no gradient cases match {args.module!r}")
    failures = 0
    for name, report, passed in results:
        status = "ok" if passed else "FAIL"
        print(f"{status:4s} {name:40s} max_rel_err={report['max_rel_err']:.3e}")
        failures += not passed
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def cmd_gradcam(args) -> int:
    model, _ = network.load_checkpoint(args.ckpt)
    image = data._load_image(Path(args.image))
    heat = analysis.grad_cam(model, Tensor(image), args.layer)
    gray = image.mean(axis=0)
    side = np.concatenate([gray, heat.upsampled], axis=1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(side * 255), 0, 255).astype(np.uint8), mode="L").save(out)
    note = " (identically zero map)" if heat.all_zero else ""
    print(f"wrote {out}: input | {args.layer} heatmap{note}")
    return EXIT_OK


def cmd_robustness(args) -> int:
    model, _ = network.load_checkpoint(args.ckpt)
    ds = _load_eval_dataset(args.data)
    specs = analysis.parse_noise_spec(args.noise_spec)
    out = Path(args.out)
    _echo_resolved(out, args.seed, extra={"command": "robustness", "noise_spec": args.noise_spec})
    rows = analysis.noise_robustness(model, ds, specs, noise_seed=args.seed)
    analysis.write_robustness_csv(rows, out / "robustness.csv")
    for row in rows:
        surface = "n/a" if row["asd"] is None else f"{row['asd']:.3f}"
        print(f"{row['kind']:8s} {row['level']:<8g} f1={row['f1']:.4f} miou={row['miou']:.4f} "
              f"sens={row['sensitivity']:.4f} prec={row['precision']:.4f} asd={surface}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    parser = _read_config_file(args.config)
    model_cfg = _model_config_from(parser["model"] if parser and parser.has_section("model") else None, args)
    train_cfg = _train_config_from(parser["train"] if parser and parser.has_section("train") else None, args)
    full = _load_eval_dataset(args.data, split="train")
    n_val = max(1, round(len(full) * args.val_frac))
    train_ds, val_ds = full.split_at(len(full) - n_val)
    sample = train_ds[0]
    if sample.image.shape[0] != model_cfg.in_channels:
        model_cfg = replace(model_cfg, in_channels=sample.image.shape[0])
    out = Path(args.out)
    _echo_resolved(out, train_cfg.seed, model_cfg, train_cfg,
                   extra={"command": "ablate", "axis": args.axis})

    def log(row):
        print(f"{row['label']:24s} params={row['params']:>9,} gflops={row['gflops']:.4f} "
              f"f1={row['f1']:.4f} miou={row['miou']:.4f}", flush=True)

    rows = analysis.ablation_sweep(model_cfg, args.axis, train_ds, val_ds, train_cfg, log=log)
    analysis.write_sweep_csv(rows, out / f"ablation-{args.axis}.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (exit 1), not argparse's exit 2
    def error(self, message):
        raise ValueError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msdcanet", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="INI file with [model]/[train] sections")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--variant", choices=sorted(network.VARIANT_CHANNELS), default=None)
    p.add_argument("--in-channels", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-every", type=int, default=None)
    p.add_argument("--augment-rotation", type=float, default=None,
                   help="extend the training set with rotated copies (max degrees)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a binary mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prob-out", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="paired t-test between two checkpoints")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("stats", help="parameter count and FLOP estimate")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--variant", choices=sorted(network.VARIANT_CHANNELS), default=None)
    p.add_argument("--in-channels", type=int, default=None)
    p.add_argument("--input-shape", default="1,1,256,256")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench", help="forward-only FPS benchmark")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--variant", choices=sorted(network.VARIANT_CHANNELS), default=None)
    p.add_argument("--in-channels", type=int, default=None)
    p.add_argument("--input-shape", default="1,1,256,256")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", default=None, help="run only cases whose name contains this")
    p.add_argument("--ops-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gradcam", help="gradient-weighted activation heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", default="F5")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("robustness", help="metrics under injected noise")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noise-spec", default="none:0,gaussian:0.05,gaussian:0.45,poisson:30")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("ablate", help="train and evaluate one ablation axis")
    p.add_argument("--axis", required=True, choices=["modules", "rates", "placement", "channels"])
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--variant", choices=sorted(network.VARIANT_CHANNELS), default=None)
    p.add_argument("--in-channels", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (trainer.TrainingDivergedError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FileExistsError, PermissionError, IsADirectoryError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except CheckpointFormatError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, PairingError, KeyError, configparser.Error) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
