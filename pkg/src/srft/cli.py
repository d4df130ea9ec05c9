"""Command-line entry point: ``srft <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as srio
from . import tensor as T
from .benchmark import run_benchmark, to_csv, to_table
from .degradation import DegradationSpec, KernelSpec, apply, random_gaussian_spec
from .finetune import FinetuneConfig, finetune
from .metrics import render_variance, uncertainty_map
from .models import build, default_spec, inject_artifact, insert_dropout, predict, prepare_input, scale_surgery
from .pretrain import TrainConfig, generate_corpus, synthesize, train

logger = logging.getLogger("srft")

DEFAULT_SEED = 20200101


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed() -> int:
    env = os.environ.get("SRFT_SEED")
    if env is None:
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SRFT_SEED must be an integer, got {env!r}") from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return p


def _kernel_arg(args) -> "KernelSpec | None":
    return srio.load_kernel(args.kernel) if getattr(args, "kernel", None) else None


def _add_ft_args(p):
    g = p.add_argument_group("fine-tuning")
    g.add_argument("--lr", type=float, default=0.01, help="learning rate (default 0.01)")
    g.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    g.add_argument("--max-iters", type=int, default=4000, help="iteration cap K (default 4000)")
    g.add_argument("--delta-db", type=float, default=0.04, help="plateau threshold in dB (default 0.04)")
    g.add_argument("--patience", type=int, default=50, help="plateau window in iterations (default 50)")


def _ft_config(args) -> FinetuneConfig:
    return FinetuneConfig(lr=args.lr, momentum=args.momentum, max_iters=args.max_iters,
                          plateau_delta_db=args.delta_db, patience=args.patience)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default: $SRFT_SEED or a fixed constant)")
    common.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="srft", description="Test-time self-supervised fine-tuning for SR networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", parents=[common], help="write synthetic HR texture images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--size", type=int, default=96)

    p = sub.add_parser("pretrain", parents=[common], help="train a toy model on an HR corpus")
    p.add_argument("--corpus", required=True, help="directory of PPM images")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--family", default="edsr_style", choices=["edsr_style", "enet_style", "vsr_style"])
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patches", type=int, default=512)
    p.add_argument("--patch-size", type=int, default=48)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2.0)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--loss", default="mse", choices=["mae", "mse"])
    p.add_argument("--curve", help="write per-epoch loss CSV here")

    p = sub.add_parser("degrade", parents=[common], help="HR image -> LR image")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--kernel", help="kernel spec file or inline text, e.g. 'gaussian 1.2 0.8 0.3 9'")
    p.add_argument("--random-gaussian", action="store_true", help="blur with a seeded random Gaussian kernel")
    p.add_argument("--kernel-out", help="write the kernel used to this file")
    p.add_argument("--no-antialias", action="store_true")

    p = sub.add_parser("surgery", parents=[common], help="adapt a x4 model to another scale")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--to-scale", type=int, required=True)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a model on one LR image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="observed LR image")
    p.add_argument("--scale", type=int, help="SR factor (default: the model's scale)")
    p.add_argument("--kernel", help="blur kernel of the test-time formation model")
    p.add_argument("--no-antialias", action="store_true")
    p.add_argument("--out-model", required=True)
    p.add_argument("--trace", required=True, help="trace CSV output")
    p.add_argument("--out-image", required=True, help="SR image output")
    _add_ft_args(p)

    p = sub.add_parser("uncertainty", parents=[common], help="MC-dropout variance map")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=int, help="SR factor (default: the model's scale)")
    p.add_argument("--p", type=float, default=0.0005, help="dropout probability (default 0.0005)")
    p.add_argument("--passes", type=int, default=50, help="stochastic forward passes (default 50)")
    p.add_argument("--out", required=True, help="variance PGM (high variance = black)")

    p = sub.add_parser("eval", parents=[common], help="start/end PSNR benchmark")
    p.add_argument("--model", required=True, action="append", help="model file (repeatable)")
    p.add_argument("--images", required=True, help="directory of HR ground-truth images")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--kernel", help="blur kernel used to produce the observations")
    p.add_argument("--finetune-kernel", help="kernel assumed during fine-tuning (blind setting)")
    p.add_argument("--train-scale", type=int, default=4, help="scale of the training-time operator (reported only)")
    p.add_argument("--no-antialias", action="store_true")
    p.add_argument("--csv", required=True)
    p.add_argument("--table", help="aligned plain-text table output")
    _add_ft_args(p)

    p = sub.add_parser("inject-artifact", parents=[common], help="add a periodic dot artifact to a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--period", type=int, default=None, help="pattern period in output pixels (default 3x scale)")
    return parser


def _list_images(directory: Path) -> list:
    files = sorted(f for f in directory.iterdir() if f.suffix.lower() in (".ppm", ".pgm"))
    if not files:
        raise ValueError(f"no .ppm/.pgm images in {directory}")
    return files


def _model_scale(model, requested):
    if requested is not None:
        return requested
    if model.spec.family == "vsr_style":
        raise ValueError("vsr_style models need an explicit --scale")
    return model.spec.scale


def cmd_gen_corpus(args, rng):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(generate_corpus(rng, args.count, args.size)):
        srio.save_image(img, out / f"hr_{k:03d}.ppm")


def cmd_pretrain(args, rng):
    images = [srio.load_image(f) for f in _list_images(_existing(args.corpus))]
    a_train = DegradationSpec.bicubic(args.scale)
    ds = synthesize(images, a_train, args.patch_size, args.patches, rng)
    model = build(default_spec(args.family, args.scale, trunk_blocks=args.blocks, width=args.width), rng)
    cfg = TrainConfig(loss=args.loss, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      momentum=args.momentum, seed=int(rng.integers(2**63)))
    model, curve = train(model, ds, cfg)
    srio.save_model(model, args.out)
    if args.curve:
        Path(args.curve).write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))


def cmd_degrade(args, rng):
    x = srio.load_image(_existing(args.input))
    if args.kernel and args.random_gaussian:
        raise UsageError("--kernel and --random-gaussian are mutually exclusive")
    if args.kernel_out and not (args.kernel or args.random_gaussian):
        raise UsageError("--kernel-out needs --kernel or --random-gaussian")
    kernel = random_gaussian_spec(rng, args.scale) if args.random_gaussian else _kernel_arg(args)
    spec = DegradationSpec.bicubic(args.scale, not args.no_antialias, kernel)
    srio.save_image(apply(spec, x), args.out)
    if args.kernel_out:
        srio.save_kernel(kernel, args.kernel_out)


def cmd_surgery(args, rng):
    model = srio.load_model(_existing(args.model))
    new, report = scale_surgery(model, args.to_scale, rng)
    if report.degraded_start:
        print(f"warning: degraded_start=true ({report.note})", file=sys.stderr)
    srio.save_model(new, args.out)


def cmd_finetune(args, rng):
    model = srio.load_model(_existing(args.model))
    y = srio.load_image(_existing(args.input))
    scale = _model_scale(model, args.scale)
    a_test = DegradationSpec.bicubic(scale, not args.no_antialias, _kernel_arg(args))
    net_in = prepare_input(model, y, scale)
    tuned, trace = finetune(model, y, a_test, _ft_config(args), net_input=net_in, rng=rng)
    srio.save_model(tuned, args.out_model)
    Path(args.trace).write_text(trace.to_csv())
    srio.save_image(predict(tuned, net_in), args.out_image)


def cmd_uncertainty(args, rng):
    model = insert_dropout(srio.load_model(_existing(args.model)), args.p)
    y = srio.load_image(_existing(args.input))
    net_in = prepare_input(model, y, _model_scale(model, args.scale))
    vmap = uncertainty_map(model, net_in, args.passes, rng)
    srio.save_image(render_variance(vmap), args.out)


def cmd_eval(args, rng):
    models = {Path(m).stem: srio.load_model(_existing(m)) for m in args.model}
    images = {f.stem: srio.load_image(f) for f in _list_images(_existing(args.images))}
    antialias = not args.no_antialias
    a_test = DegradationSpec.bicubic(args.scale, antialias, _kernel_arg(args))
    a_ft = None
    if args.finetune_kernel:
        a_ft = DegradationSpec.bicubic(args.scale, antialias, srio.load_kernel(args.finetune_kernel))
    a_train = DegradationSpec.bicubic(args.train_scale)
    records = run_benchmark(models, images, a_train, a_test, _ft_config(args), a_finetune=a_ft,
                            threads=args.threads)
    Path(args.csv).write_text(to_csv(records, a_train, a_test, a_ft))
    table = to_table(records, a_train, a_test, a_ft)
    if args.table:
        Path(args.table).write_text(table)
    print(table, end="")
    for r in records:
        logger.info("%s/%s: %.2f s", r.model_id, r.image_id, r.wall_seconds)


def cmd_inject_artifact(args, rng):
    model = srio.load_model(_existing(args.model))
    period = args.period if args.period is not None else 3 * model.spec.scale
    srio.save_model(inject_artifact(model, args.eps, period, rng), args.out)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "degrade": cmd_degrade,
    "surgery": cmd_surgery,
    "finetune": cmd_finetune,
    "uncertainty": cmd_uncertainty,
    "eval": cmd_eval,
    "inject-artifact": cmd_inject_artifact,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        seed = args.seed if args.seed is not None else _default_seed()
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    T.set_threads(args.threads)
    rng = np.random.default_rng(seed)
    try:
        COMMANDS[args.command](args, rng)
    except UsageError as exc:
        print(f"srft {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"srft {args.command}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        T.set_threads(1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
