"""``tvmerge`` command line: each subcommand reads and writes files on disk.

Every option can also come from ``--config FILE`` (``key=value`` lines, keys are
the long option names with ``_`` for ``-``); flags on the command line win.
The resolved options are written to ``config.resolved`` in the run's output
directory, or next to the output checkpoint as ``<out>.config.resolved``.

Exit status: 0 success, 1 domain error (error class name on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import analysis, data
from .adamerge import PLAIN, PLUS_PLUS, AdaMergeConfig, adamerge_run
from .config import RESOLVED_NAME, RunConfig, load_config, merge_layers
from .errors import ParseError, TvMergeError, UnknownKey
from .nn import MlpSpec, init_params
from .params import load_checkpoint, save_checkpoint
from .task_vectors import (
    DEFAULT_KEEP_FRACTION,
    DEFAULT_LAMBDA,
    LAYER_WISE,
    TASK_WISE,
    fixed_task_arithmetic,
    make_task_vector,
    phi,
    weight_average,
)

log = logging.getLogger("tvmerge")

SCHEMES = (
    "average", "task-arithmetic", "ties",
    "adamerging-task", "adamerging-layer", "adamerging++-task", "adamerging++-layer",
)


def _csv(kind: Callable[[str], Any]) -> Callable[[str], list]:
    def parse(text: str) -> list:
        return [kind(part.strip()) for part in text.split(",") if part.strip()]
    parse.__name__ = f"list of {kind.__name__}"
    return parse


def _path(text: str) -> Path:
    return Path(text).expanduser().resolve()


@dataclass(frozen=True)
class Opt:
    key: str
    type: Callable[[str], Any]
    default: Any = None
    help: str = ""
    required: bool = False
    choices: tuple | None = None
    nargs: str | None = None


SEED = Opt("seed", int, 0, "random seed")
THREADS = Opt("threads", int, 1, "worker threads; results do not depend on it")
ADA = [
    Opt("steps", int, 500, "optimization steps"),
    Opt("lr", float, 0.001, "Adam learning rate"),
    Opt("beta1", float, 0.9), Opt("beta2", float, 0.999), Opt("eps", float, 1e-8),
    Opt("batch_size", int, 16, "unlabeled samples drawn per task and step"),
    Opt("init_coeff", float, 0.3, "initial value of every coefficient"),
    Opt("keep_fraction", float, DEFAULT_KEEP_FRACTION, "fraction of coordinates kept by the trim step"),
    Opt("tasks", _csv(str), None, "tasks whose unlabeled pools drive adaptation (default: the merged tasks)"),
    Opt("corruption", str, "none", "corrupt the unlabeled pools", choices=("none",) + data.CORRUPTIONS),
    Opt("severity", float, 0.0),
    Opt("out_dir", _path, None, "directory for coeffs.csv and trajectory.csv"),
]
EVAL_OPTS = [
    Opt("model", _path, required=True, help="merged or single model checkpoint"),
    Opt("data", _path, required=True, help="bundle directory"),
    Opt("out_dir", _path, required=True),
    Opt("tasks", _csv(str), None, "subset of tasks to evaluate"),
    Opt("corruption", str, "none", choices=("none",) + data.CORRUPTIONS),
    Opt("severity", float, 0.0),
    Opt("tag", str, ""),
    SEED,
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("out", _path, required=True, help="bundle directory to create"),
        Opt("tasks", int, 8), Opt("dim", int, 32), Opt("classes", int, 4), Opt("per_class", int, 200),
        Opt("noise", float, 1.0), Opt("separation", float, data.DEFAULT_SEPARATION),
        Opt("rotation", float, data.DEFAULT_ROTATION), Opt("shift", float, data.DEFAULT_SHIFT),
        SEED,
    ],
    "pretrain": [
        Opt("data", _path, required=True), Opt("out", _path, required=True),
        Opt("hidden", _csv(int), list(data.DEFAULT_HIDDEN), "hidden layer widths"),
        Opt("epochs", int, data.DEFAULT_PRETRAIN_EPOCHS), Opt("lr", float, data.DEFAULT_PRETRAIN_LR),
        Opt("batch_size", int, 32), Opt("granularity", int, data.DEFAULT_GRANULARITY, "classes per pretraining label group"),
        SEED,
    ],
    "finetune": [
        Opt("data", _path, required=True), Opt("init", _path, required=True, help="pretrained checkpoint"),
        Opt("task", str, required=True), Opt("out", _path, required=True),
        Opt("epochs", int, data.DEFAULT_FINETUNE_EPOCHS), Opt("lr", float, data.DEFAULT_FINETUNE_LR),
        Opt("batch_size", int, 32), SEED,
    ],
    "merge": [
        Opt("scheme", str, required=True, choices=SCHEMES),
        Opt("pretrained", _path, required=True), Opt("finetuned", _path, required=True, nargs="+"),
        Opt("out", _path, required=True),
        Opt("lambda", float, DEFAULT_LAMBDA, "shared coefficient for fixed schemes"),
        Opt("data", _path, None, "bundle directory (adamerging schemes)"),
        *ADA, SEED,
    ],
    "adamerge": [
        Opt("pretrained", _path, required=True), Opt("finetuned", _path, required=True, nargs="+"),
        Opt("data", _path, required=True), Opt("out", _path, required=True),
        Opt("mode", str, LAYER_WISE, choices=(TASK_WISE, LAYER_WISE)),
        Opt("variant", str, PLAIN, choices=(PLAIN, PLUS_PLUS)),
        *ADA, SEED,
    ],
    "eval": EVAL_OPTS,
    "analyze": EVAL_OPTS + [Opt("run_dir", _path, None, "adamerge output directory whose CSVs are copied over")],
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvmerge", description="Merge fine-tuned checkpoints with task vectors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", type=_path, help="key=value file; flags override it")
        for o in opts + [THREADS]:
            kwargs = dict(type=o.type, help=o.help or None, dest=o.key)
            if o.choices:
                kwargs["choices"] = o.choices
            if o.nargs:
                kwargs["nargs"] = o.nargs
            p.add_argument(_flag(o.key), **kwargs)
    return parser


def resolve(parser: argparse.ArgumentParser, args: argparse.Namespace) -> RunConfig:
    opts = {o.key: o for o in COMMANDS[args.command] + [THREADS]}
    flags = {k: v for k, v in vars(args).items() if k in opts}
    from_file = {}
    if getattr(args, "config", None) is not None:
        try:
            file_values = load_config(args.config, opts)
        except (ParseError, UnknownKey, OSError) as exc:
            parser.error(f"--config {args.config}: {type(exc).__name__}: {exc}")
        for key, text in file_values.items():
            o = opts[key]
            try:
                if text == "":
                    value = None  # config.resolved writes unset options as empty
                else:
                    value = [o.type(t) for t in text.split(",")] if o.nargs else o.type(text)
            except (TypeError, ValueError) as exc:
                parser.error(f"{_flag(key)} (from {args.config}): {exc}")
            if o.choices and value not in o.choices:
                parser.error(f"{_flag(key)} (from {args.config}): {value!r} not in {o.choices}")
            from_file[key] = value
    values = merge_layers({k: o.default for k, o in opts.items()}, from_file, flags)
    missing = [_flag(k) for k, o in opts.items() if o.required and values.get(k) is None]
    if missing:
        parser.error(f"{args.command}: missing required option(s) {', '.join(missing)}")
    if values["threads"] < 1:
        parser.error("--threads must be >= 1")
    return RunConfig(args.command, values)


def _resolved_path(cfg: RunConfig) -> Path:
    if cfg.values.get("out_dir") is not None:
        return cfg.out_dir / RESOLVED_NAME
    out = cfg.out
    return out / RESOLVED_NAME if cfg.command == "gen-data" else out.with_name(out.name + "." + RESOLVED_NAME)


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> None:
    bundles = data.generate_tasks(
        cfg.tasks, cfg.dim, cfg.classes, cfg.per_class, cfg.seed,
        noise=cfg.noise, separation=cfg.separation, rotation=cfg.rotation, shift=cfg.shift,
    )
    data.save_bundles(bundles, cfg.out)


def cmd_pretrain(cfg: RunConfig) -> None:
    bundles = data.load_bundles(cfg.data)
    dim = bundles[0].train_x.shape[1]
    classes = int(max(int(b.params.get("classes", 0)) for b in bundles)) or int(max(b.train_y.max() for b in bundles)) + 1
    spec = MlpSpec((dim, *cfg.hidden, classes))
    init = init_params(spec, cfg.seed, {"role": "pretrained"})
    theta = data.reference_train(
        spec, init, data.mixture_bundle(bundles), cfg.epochs, cfg.lr, cfg.seed,
        batch_size=cfg.batch_size, granularity=cfg.granularity,
    )
    save_checkpoint(theta, cfg.out)


def cmd_finetune(cfg: RunConfig) -> None:
    (bundle,) = data.load_bundles(cfg.data, [cfg.task])
    pre = load_checkpoint(cfg.init)
    spec = MlpSpec.from_params(pre)
    theta = data.reference_train(spec, pre, bundle, cfg.epochs, cfg.lr, cfg.seed, batch_size=cfg.batch_size)
    theta = theta.with_arrays([e.data for e in theta], {**pre.meta, "role": "finetuned", "task_id": cfg.task, "seed": str(cfg.seed)})
    save_checkpoint(theta, cfg.out)


def _load_models(cfg: RunConfig):
    pre = load_checkpoint(cfg.pretrained)
    finetuned = [load_checkpoint(p) for p in cfg.finetuned]
    task_ids = [ft.meta.get("task_id", Path(p).stem) for ft, p in zip(finetuned, cfg.finetuned)]
    return pre, finetuned, task_ids


def _run_adamerging(cfg: RunConfig, mode: str, variant: str) -> None:
    if cfg.data is None:
        raise TvMergeError("adamerging schemes need --data")
    pre, finetuned, task_ids = _load_models(cfg)
    bundles = data.load_bundles(cfg.data, cfg.tasks or task_ids)
    if cfg.corruption != "none":
        bundles = data.corrupt_bundles(bundles, data.CorruptionKind(cfg.corruption, cfg.severity, cfg.seed))
    config = AdaMergeConfig(
        mode=mode, variant=variant, init_coeff=cfg.init_coeff, learning_rate=cfg.lr,
        adam_beta1=cfg.beta1, adam_beta2=cfg.beta2, adam_eps=cfg.eps, batch_size=cfg.batch_size,
        steps=cfg.steps, seed=cfg.seed, phi_keep_fraction=cfg.keep_fraction, threads=cfg.threads,
    )
    result = adamerge_run(config, pre, finetuned, {b.task_id: b.unlabeled for b in bundles}, task_ids=task_ids)
    save_checkpoint(result.merged, cfg.out)
    if cfg.out_dir is not None:
        analysis.emit_reports(cfg.out_dir, trajectory=result.trajectory, coeffs=result.coeffs)


def cmd_merge(cfg: RunConfig) -> None:
    scheme = cfg.scheme
    if scheme.startswith("adamerging"):
        variant = PLUS_PLUS if scheme.startswith("adamerging++") else PLAIN
        mode = TASK_WISE if scheme.endswith("-task") else LAYER_WISE
        _run_adamerging(cfg, mode, variant)
        return
    pre, finetuned, task_ids = _load_models(cfg)
    vectors = [make_task_vector(ft, pre, tid) for ft, tid in zip(finetuned, task_ids)]
    if scheme == "average":
        merged = weight_average(pre, vectors)
    elif scheme == "ties":
        merged = fixed_task_arithmetic(pre, phi(vectors, cfg.keep_fraction), cfg.values["lambda"])
    else:
        merged = fixed_task_arithmetic(pre, vectors, cfg.values["lambda"])
    merged = merged.with_arrays([e.data for e in merged], {**pre.meta, "scheme": scheme, "tasks": ",".join(task_ids)})
    save_checkpoint(merged, cfg.out)


def cmd_adamerge(cfg: RunConfig) -> None:
    _run_adamerging(cfg, cfg.mode, cfg.variant)


def _eval_inputs(cfg: RunConfig):
    theta = load_checkpoint(cfg.model)
    bundles = data.load_bundles(cfg.data, cfg.tasks)
    if cfg.corruption != "none":
        bundles = data.corrupt_bundles(bundles, data.CorruptionKind(cfg.corruption, cfg.severity, cfg.seed))
    return MlpSpec.from_params(theta), theta, bundles


def cmd_eval(cfg: RunConfig) -> None:
    spec, theta, bundles = _eval_inputs(cfg)
    report = analysis.evaluate(spec, theta, bundles, cfg.tag or theta.meta.get("scheme", cfg.model.stem))
    correlation = analysis.entropy_loss_correlation(spec, theta, bundles)
    analysis.emit_reports(cfg.out_dir, eval_report=report, correlation=correlation)
    print(f"avg_acc {report.avg_acc:.4f}")


def cmd_analyze(cfg: RunConfig) -> None:
    cmd_eval(cfg)
    if cfg.run_dir is not None:
        for name in ("coeffs.csv", "trajectory.csv"):
            src = cfg.run_dir / name
            if src.exists() and src.resolve() != (cfg.out_dir / name).resolve():
                shutil.copyfile(src, cfg.out_dir / name)


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "merge": cmd_merge,
    "adamerge": cmd_adamerge, "eval": cmd_eval, "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg.write(_resolved_path(cfg))
        HANDLERS[cfg.command](cfg)
    except TvMergeError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"IoError: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
