"""``interfuse`` command line: train, fuse, eval, ate, masks-demo.

Every subcommand resolves its options as defaults < ``--config`` file <
flags, prints the resolved options to stderr (or to stdout with
``--print-config``, which then exits) and persists them next to its outputs.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import format_config, parse_config_file, resolve
from .errors import CheckpointError, ConfigError, DataError, NumericalError, SamplingError
from .trainer import TrainConfig

logger = logging.getLogger("interfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class FuseOptions:
    checkpoint: str = ""
    vi: str = ""
    ir: str = ""
    out: str = "fused.png"
    color: bool = False
    seed: int = 0


@dataclass
class EvalOptions:
    data: str = ""
    checkpoint: str = ""
    fused_dir: str = ""
    out: str = ""  # report file; stdout when empty
    json: bool = False
    figure: str = ""
    seed: int = 0


@dataclass
class ATEOptions:
    checkpoint: str = ""
    data: str = ""
    seeds: tuple[int, ...] = (0, 1, 2)
    metric: str = "both"  # PSNR, CC or both
    block_size: int = 16
    out: str = ""
    json: bool = False
    chart: str = ""
    seed: int = 0  # offsets every entry of ``seeds``


@dataclass
class MasksDemoOptions:
    out: str = "masks_demo"
    height: int = 256
    width: int = 256
    block_size: int = 16
    samples: int = 4
    seed: int = 0


# short flag spellings for long field names
ALIASES = {"batch_size": ["--batch"], "learning_rate": ["--lr"]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_fields(parser: argparse.ArgumentParser, cls) -> None:
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        flags = ["--" + f.name.replace("_", "-")] + ALIASES.get(f.name, [])
        tp = hints[f.name]
        default = f.default
        if tp is bool and default is False:
            parser.add_argument(*flags, dest=f.name, action="store_true", default=argparse.SUPPRESS)
        elif tp is bool:
            parser.add_argument(*flags, dest=f.name, action=argparse.BooleanOptionalAction,
                                default=argparse.SUPPRESS)
        else:
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            parser.add_argument(*flags, dest=f.name, default=argparse.SUPPRESS, metavar="V",
                                help=f"(default: {shown!s})")
    parser.add_argument("--config", dest="_config", default=None, help="flat 'key = value' file")
    parser.add_argument("--print-config", dest="_print_config", action="store_true",
                        help="print the resolved options and exit")


COMMANDS = {
    "train": (TrainConfig, "train a fusion model"),
    "fuse": (FuseOptions, "fuse one registered pair with a checkpoint"),
    "eval": (EvalOptions, "compute AG, SF, PSNR, CC and Qabf over a dataset"),
    "ate": (ATEOptions, "average treatment effect of each intervention"),
    "masks-demo": (MasksDemoOptions, "write sample intervention masks and statistics"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="interfuse", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (cls, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        _add_fields(p, cls)
        if name == "train":
            p.add_argument("--resume", dest="_resume", default=None, help="train-state checkpoint")
    return parser


def resolve_options(args: argparse.Namespace):
    cls = COMMANDS[args.command][0]
    file_values = parse_config_file(args._config) if args._config else {}
    flags = {k: v for k, v in vars(args).items()
             if not k.startswith("_") and k not in ("command", "verbose")}
    return resolve(cls, file_values, flags)


def _persist(text: str, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _require(opts, *names):
    for name in names:
        if not getattr(opts, name):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _load_dataset(path):
    from .data import PairDataset

    ds = PairDataset.from_directory(path)
    if len(ds) == 0:
        raise DataError(f"no image pairs found under {path}")
    return ds


def cmd_train(opts: TrainConfig, args) -> int:
    from .trainer import train

    _require(opts, "data")
    train_set = _load_dataset(opts.data)
    val_set = _load_dataset(opts.val or opts.data)  # always a separate loader object
    best = train(opts, train_set, val_set, resume=args._resume)
    print(f"best checkpoint: {best}")
    return EXIT_OK


def cmd_fuse(opts: FuseOptions, args) -> int:
    from .checkpoint import load_model
    from .data import chroma_reinject, load_image_pair, rgb_to_luma_chroma, save_image
    from .metrics import fuse_pair

    _require(opts, "checkpoint", "vi", "ir")
    pair = load_image_pair(opts.vi, opts.ir)
    model = load_model(opts.checkpoint)[0]
    fused = fuse_pair(model, pair)
    if opts.color:
        fused = chroma_reinject(fused, rgb_to_luma_chroma(pair.visible).chroma)
    out = save_image(opts.out, fused)
    _persist(format_config(opts), out.with_name(out.name + ".config.txt"))
    print(out)
    return EXIT_OK


def cmd_eval(opts: EvalOptions, args) -> int:
    from .metrics import evaluate_dataset

    _require(opts, "data")
    if bool(opts.checkpoint) == bool(opts.fused_dir):
        raise UsageError("give exactly one of --checkpoint or --fused-dir")
    dataset = _load_dataset(opts.data)
    if opts.checkpoint:
        from .checkpoint import load_model

        report = evaluate_dataset(dataset, model=load_model(opts.checkpoint)[0],
                                  checkpoint_id=Path(opts.checkpoint).name)
    else:
        if not Path(opts.fused_dir).is_dir():
            raise FileNotFoundError(f"fused directory not found: {opts.fused_dir}")
        report = evaluate_dataset(dataset, fused_dir=opts.fused_dir)
    text = report.to_json() + "\n" if opts.json else report.to_csv()
    _emit(text, opts.out, opts)
    if opts.figure:
        from .plotting import plot_metric_report

        plot_metric_report(report, opts.figure)
    return EXIT_OK


def _emit(text: str, out: str, opts) -> None:
    if out:
        _persist(text, Path(out))
        _persist(format_config(opts), Path(out + ".config.txt"))
    else:
        sys.stdout.write(text)


def cmd_ate(opts: ATEOptions, args) -> int:
    from .ate import run_ate_suite
    from .checkpoint import load_model
    from .interventions import InterventionConfig

    _require(opts, "checkpoint", "data")
    metrics = {"both": ("PSNR", "CC"), "PSNR": ("PSNR",), "CC": ("CC",)}.get(opts.metric)
    if metrics is None:
        raise ConfigError(f"--metric must be PSNR, CC or both, got {opts.metric!r}")
    dataset = _load_dataset(opts.data)
    model = load_model(opts.checkpoint)[0]
    seeds = [opts.seed + s for s in opts.seeds]
    report = run_ate_suite(model, dataset, seeds, metrics, InterventionConfig(block_size=opts.block_size))
    report.metadata["checkpoint"] = Path(opts.checkpoint).name
    text = report.to_json() + "\n" if opts.json else report.to_csv()
    _emit(text, opts.out, opts)
    if opts.chart:
        from .plotting import plot_ate

        plot_ate(report, opts.chart)
    return EXIT_OK


def cmd_masks_demo(opts: MasksDemoOptions, args) -> int:
    from .data import save_image
    from .interventions import InterventionConfig, make_intervention_set

    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(opts.seed)
    cfg = InterventionConfig(block_size=opts.block_size)
    stats = []
    for i in range(opts.samples):
        s = make_intervention_set(opts.height, opts.width, cfg, rng)
        entry = {"sample": i, "overlap_pixels": int(np.sum(s.comp_vi.occluded & s.comp_ir.occluded))}
        for name, mask in (("comp_vi", s.comp_vi), ("comp_ir", s.comp_ir), ("random", s.random_shared)):
            save_image(out / f"mask_{i:02d}_{name}.png", mask.keep[None])
            entry[name] = {"count": len(mask.blocks), "blocks": [list(b) for b in mask.blocks],
                           "occluded_fraction": mask.occluded_fraction}
        stats.append(entry)
    (out / "stats.json").write_text(json.dumps({"block_size": opts.block_size, "samples": stats}, indent=2) + "\n")
    _persist(format_config(opts), out / "masks_demo_config.txt")
    print(out / "stats.json")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "fuse": cmd_fuse, "eval": cmd_eval, "ate": cmd_ate,
            "masks-demo": cmd_masks_demo}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = resolve_options(args)
        if args._print_config:
            sys.stdout.write(format_config(opts))
            return EXIT_OK
        sys.stderr.write(format_config(opts))
        return HANDLERS[args.command](opts, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SamplingError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
