"""Command-line entry point: ``ncct <command> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical divergence,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import model as M
from . import report
from .dataset import (
    DatasetFormatError,
    generate_toy_split,
    inject_asymmetric_noise,
    inject_symmetric_noise,
    load_dataset,
    manifest_path,
    save_dataset,
    validate_pairs,
)
from .trainer import (
    MODES,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    metrics_csv,
    read_metrics_csv,
    read_sweep_csv,
    sweep_csv,
    sweep_k,
    train,
)

log = logging.getLogger("ncct")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
RUN_MANIFEST = "run.json"


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# run manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    cwd: str = field(default_factory=lambda: str(Path.cwd()))
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def finish(self, outputs, path) -> None:
        """Checksum every output (they must all exist) and write the manifest."""
        self.outputs = {str(p): sha256_file(p) for p in outputs}
        self.finished = _now()
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# config handling


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments ignored."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from None
    known = TrainConfig.field_types()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}; valid keys: {', '.join(known)}")
        values[key] = value
    return values


# flag dest -> TrainConfig field
TRAIN_FLAGS = {
    "mode": "mode",
    "k": "k",
    "epochs": "epochs",
    "warmup": "warmup_epochs",
    "batch_size": "batch_size",
    "lr_backbone": "lr_backbone",
    "lr_heads": "lr_heads",
    "optimizer": "optimizer",
    "momentum": "momentum",
    "conv1": "conv1_channels",
    "conv2": "conv2_channels",
    "dtype": "dtype",
    "checkpoint_every": "checkpoint_every",
    "seed": "seed",
}


def effective_config(args) -> TrainConfig:
    """Built-in defaults, overridden by the config file, overridden by flags."""
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    for dest, name in TRAIN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def read_pairs_file(path) -> dict[int, int]:
    """Lines of ``src,dst`` class indices; ``#`` comments allowed."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read pairs file {path}: {exc}") from None
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or not all(p.lstrip("-").isdigit() for p in parts):
            raise UsageError(f"{path}:{lineno}: malformed pair {raw!r}; expected 'src,dst' class indices")
        src, dst = int(parts[0]), int(parts[1])
        if src in pairs:
            raise UsageError(f"{path}:{lineno}: class {src} listed twice")
        pairs[src] = dst
    if not pairs:
        raise UsageError(f"{path}: no pairs found")
    return pairs


def default_pairs_file():
    return resources.files("ncct").joinpath("data/default_pairs.txt")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _load(path, what: str):
    return load_dataset(_require_file(path, what))


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, manifest: RunManifest) -> int:
    if args.classes < 2:
        raise UsageError(f"--classes must satisfy C >= 2, got {args.classes}")
    seed = args.seed if args.seed is not None else 0
    try:
        d = generate_toy_split(args.split, args.classes, args.per_class, args.size, args.variation, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    manifest.config = dict(classes=args.classes, per_class=args.per_class, size=args.size,
                           variation=args.variation, split=args.split, seed=seed)
    save_dataset(d, out, {"seed": seed, "variation": args.variation})
    manifest.finish([out, manifest_path(out)], _file_manifest(out))
    print(f"wrote {len(d)} samples ({args.split}) to {out}")
    return EXIT_OK


def cmd_inject_noise(args, manifest: RunManifest) -> int:
    src = _require_file(args.input, "input dataset")
    d = load_dataset(src)
    manifest.add_input(src)
    seed = args.seed if args.seed is not None else 0
    if not 0.0 <= args.rate <= 1.0:
        raise UsageError(f"--rate must lie in [0, 1], got {args.rate}")
    if args.kind == "sym":
        if args.pairs:
            raise UsageError("--pairs only applies to --kind asym")
        noisy = inject_symmetric_noise(d, args.rate, seed)
        pairs_path = None
    else:
        pairs_path = args.pairs or default_pairs_file()
        if args.pairs:
            manifest.add_input(args.pairs)
        pairs = read_pairs_file(pairs_path)
        try:
            validate_pairs(pairs, d.num_classes)
        except ValueError as exc:
            raise UsageError(f"{pairs_path}: {exc}") from None
        noisy = inject_asymmetric_noise(d, args.rate, pairs, seed)
    out = Path(args.out)
    manifest.config = dict(kind=args.kind, rate=args.rate, seed=seed,
                           pairs=None if pairs_path is None else str(pairs_path))
    save_dataset(noisy, out, {"noise_kind": args.kind, "noise_rate": args.rate, "seed": seed})
    manifest.finish([out, manifest_path(out)], _file_manifest(out))
    print(f"realized noise rate: {noisy.noise_rate():.3f}")
    return EXIT_OK


def cmd_train(args, manifest: RunManifest) -> int:
    cfg = effective_config(args)
    train_set = _load(args.train, "train dataset")
    test_set = _load(args.test, "test dataset")
    try:
        cfg.validate(train_set.num_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest.add_input(args.train)
    manifest.add_input(args.test)
    manifest.config = cfg.to_dict()
    out = _out_dir(args)
    ckpt_dir = out / "checkpoints" if cfg.checkpoint_every else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)
    result = train(cfg, train_set, test_set, checkpoint_dir=ckpt_dir)
    outputs = [_write(out / "metrics.csv", metrics_csv(result, timing=args.timing))]
    M.save_checkpoint(result.params, out / "model.ncpt")
    outputs.append(out / "model.ncpt")
    outputs += [Path(p) for p in result.checkpoints]
    manifest.finish(outputs, out / RUN_MANIFEST)
    print(f"max {result.max_accuracy:.4f} last5 {result.last5_mean:.4f} -> {out}")
    return EXIT_OK


def _checkpoint_dtype(ckpt: Path, override: str | None) -> str:
    """dtype the checkpoint was trained in, read from its run manifest if present."""
    if override:
        return override
    run = ckpt.parent / RUN_MANIFEST
    if run.is_file():
        return RunManifest.load(run).config.get("dtype", "float32")
    return "float32"


def _load_checkpoint(path, dtype_flag):
    p = _require_file(path, "checkpoint")
    return M.cast_params(M.load_checkpoint(p), np.dtype(_checkpoint_dtype(p, dtype_flag)))


def cmd_eval(args, manifest: RunManifest) -> int:
    params = _load_checkpoint(args.checkpoint, args.dtype)
    test_set = _load(args.test, "test dataset")
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.test)
    try:
        metrics = evaluate(params, test_set)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"accuracy: {metrics.accuracy:.4f}")
    print(report.confusion_text(metrics.confusion_matrix), end="")
    if args.out:
        out = _out_dir(args)
        outputs = [
            _write(out / "confusion.csv", report.confusion_csv(metrics.confusion_matrix)),
            _write(out / "confusion.txt", report.confusion_text(metrics.confusion_matrix)),
        ]
        manifest.config = {"accuracy": metrics.accuracy}
        manifest.finish(outputs, out / RUN_MANIFEST)
    return EXIT_OK


def cmd_sweep_k(args, manifest: RunManifest) -> int:
    cfg = effective_config(args)
    train_set = _load(args.train, "train dataset")
    test_set = _load(args.test, "test dataset")
    manifest.add_input(args.train)
    manifest.add_input(args.test)
    pairs = None
    if args.noise_kind == "asym":
        pairs = read_pairs_file(args.pairs or default_pairs_file())
        if args.pairs:
            manifest.add_input(args.pairs)
    seeds = args.seeds or [cfg.seed]
    manifest.config = dict(cfg.to_dict(), k_values=args.k_values, noise_rates=args.noise_rates,
                           noise_kind=args.noise_kind, modes=args.modes or [cfg.mode], seeds=seeds)
    try:
        rows = sweep_k(cfg, train_set, test_set, args.k_values, args.noise_rates, args.noise_kind,
                       pairs, workers=args.workers, modes=args.modes, seeds=seeds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    outputs = [
        _write(out / "sweep.csv", sweep_csv(rows)),
        _write(out / "k_sweep.svg", report.k_sweep_svg(rows)),
    ]
    manifest.finish(outputs, out / RUN_MANIFEST)
    print(f"{len(rows)} runs -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_report(args, manifest: RunManifest) -> int:
    if not (args.metrics or args.sweep or args.checkpoint):
        raise UsageError("report needs at least one of --metrics, --sweep or --checkpoint/--test")
    if bool(args.checkpoint) != bool(args.test):
        raise UsageError("--checkpoint and --test go together")
    missing = [p for p in (args.metrics, args.sweep, args.checkpoint, args.test) if p and not Path(p).is_file()]
    if missing:
        raise InputError("missing input files: " + ", ".join(str(p) for p in missing))
    out = _out_dir(args)
    outputs = []
    if args.checkpoint:
        params = _load_checkpoint(args.checkpoint, args.dtype)
        test_set = load_dataset(args.test)
        manifest.add_input(args.checkpoint)
        manifest.add_input(args.test)
        cm = evaluate(params, test_set).confusion_matrix
        names = None
        if cm.shape[0] == 7:
            from .dataset import EXPRESSIONS

            names = list(EXPRESSIONS)
        outputs.append(_write(out / "confusion.txt", report.confusion_text(cm, names)))
        outputs.append(_write(out / "confusion.csv", report.confusion_csv(cm)))
        print(report.confusion_text(cm, names), end="")
    if args.metrics:
        manifest.add_input(args.metrics)
        rows = read_metrics_csv(args.metrics)
        if not rows:
            raise InputError(f"{args.metrics} has no epochs")
        svg = report.accuracy_curve_svg([r["epoch"] for r in rows], [r["test_acc"] for r in rows])
        outputs.append(_write(out / "accuracy.svg", svg))
    if args.sweep:
        manifest.add_input(args.sweep)
        sweep_rows = read_sweep_csv(args.sweep)
        if not sweep_rows:
            raise InputError(f"{args.sweep} has no rows")
        outputs.append(_write(out / "k_sweep.svg", report.k_sweep_svg(sweep_rows)))
    manifest.config = {}
    manifest.finish(outputs, out / RUN_MANIFEST)
    for p in outputs:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_replay(args, manifest: RunManifest) -> int:
    """Re-run the command recorded in a run manifest, optionally into a new output."""
    recorded = RunManifest.load(_require_file(args.manifest, "run manifest"))
    argv = list(recorded.argv)
    if args.out:
        argv = _replace_out(argv, str(Path(args.out).resolve()))
    if recorded.command == "replay":
        raise UsageError("refusing to replay a replay manifest")
    # relative paths in the recorded argv are relative to the original cwd
    here = Path.cwd()
    try:
        os.chdir(recorded.cwd)
    except OSError as exc:
        raise InputError(f"cannot enter recorded working directory {recorded.cwd}: {exc}") from None
    try:
        return main(argv)
    finally:
        os.chdir(here)


def _replace_out(argv: list[str], out: str) -> list[str]:
    result, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a in ("-o", "--out"):
            skip = True
            continue
        if a.startswith("--out="):
            continue
        result.append(a)
    return result + ["-o", out]


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".run.json")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset copy of a flag from clobbering a value
    # given before the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat 'key = value' file of TrainConfig fields")
    common.add_argument("-o", "--out", default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="ncct", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="generate a toy expression dataset")
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--size", type=int, default=32, help="image side, a multiple of 4 and at least 8")
    p.add_argument("--variation", type=float, default=0.3, help="intra-class variation in [0, 1]")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_gen_data, needs_out=True)

    p = sub.add_parser("inject-noise", parents=[common], help="inject synthetic label noise")
    p.add_argument("input", help="clean NCDS train split")
    p.add_argument("--kind", choices=("sym", "asym"), default="sym")
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--pairs", help="'src,dst' lines for asym noise (default: shipped expression pairs)")
    p.set_defaults(func=cmd_inject_noise, needs_out=True)

    def train_flags(p):
        p.add_argument("--train", required=True, help="NCDS train split")
        p.add_argument("--test", required=True, help="NCDS test split")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--k", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--warmup", type=int, help="warm-up epochs")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr-backbone", type=float)
        p.add_argument("--lr-heads", type=float)
        p.add_argument("--optimizer", choices=("adam", "sgd"))
        p.add_argument("--momentum", type=float)
        p.add_argument("--conv1", type=int, help="conv1 channels")
        p.add_argument("--conv2", type=int, help="conv2 channels (feature dimension)")
        p.add_argument("--dtype", choices=("float32", "float64"))
        p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("train", parents=[common], help="train one model")
    train_flags(p)
    p.add_argument("--timing", action="store_true", help="record wall-clock seconds in metrics.csv")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("sweep-k", parents=[common], help="train across k values and noise rates")
    train_flags(p)
    p.add_argument("--k-values", type=_ints, default=[1, 2, 3, 4, 5, 6, 7])
    p.add_argument("--noise-rates", type=_floats, help="inject these rates into a clean --train set")
    p.add_argument("--noise-kind", choices=("sym", "asym"), default="sym")
    p.add_argument("--pairs")
    p.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m],
                   help=f"comma-separated subset of {','.join(MODES)}")
    p.add_argument("--seeds", type=_ints, help="comma-separated run seeds (default: --seed)")
    p.add_argument("--workers", type=int, help="worker processes (default: NCCT_THREADS or 1)")
    p.set_defaults(func=cmd_sweep_k, needs_out=True)

    p = sub.add_parser("report", parents=[common], help="render tables and SVG plots")
    p.add_argument("--metrics", help="metrics.csv from train")
    p.add_argument("--checkpoint", help="model checkpoint for the confusion matrix")
    p.add_argument("--test", help="test split for the confusion matrix")
    p.add_argument("--sweep", help="sweep.csv from sweep-k")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.set_defaults(func=cmd_report, needs_out=True)

    p = sub.add_parser("replay", parents=[common], help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay, needs_out=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name in ("seed", "config", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.needs_out and not args.out:
        parser.print_usage(sys.stderr)
        print(f"ncct {args.command}: error: -o/--out is required", file=sys.stderr)
        return EXIT_USAGE
    manifest = RunManifest(command=args.command, argv=argv, config={})
    try:
        return args.func(args, manifest)
    except UsageError as exc:
        print(f"ncct {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"ncct {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, DatasetFormatError, M.CheckpointFormatError, OSError) as exc:
        print(f"ncct {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"ncct {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
