"""Command line: datagen, fit-units, train, eval, gradcheck, report.

Exit status is 0 on success, 1 for invalid input (bad flags, bad config
values, unknown config keys) and 2 when a run fails for any other reason.
Every subcommand writes ``resolved_config.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import eval as E
from . import gradcheck, pipeline
from .audio import default_output_root
from .errors import ConfigError, SpkDistillError
from .trainer import TrainConfig

log = logging.getLogger("spkdistill")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
MODES = {"dino": "dino", "aam": "aam_softmax", "none": "none"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser, config_help: str = "JSON config file") -> None:
    p.add_argument("--config", type=Path, help=config_help)
    p.add_argument("--out", type=Path, help="output directory (default: $SPKDISTILL_OUT/<command>)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=sorted(MODES), help="speaker loss")
    p.add_argument("--augment", choices=("on", "off"))
    p.add_argument("--stage1-steps", type=int)
    p.add_argument("--stage2-steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the speaker loss")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spkdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="synthesise train/test corpora and noise banks")
    _add_common(p, "JSON corpus settings")

    p = sub.add_parser("fit-units", help="fit the k-means unit codebook on clean training audio")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train", help="two-stage joint training")
    _add_common(p)
    _add_train_overrides(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--units", type=Path, required=True, help="codebook file from fit-units")

    p = sub.add_parser("eval", help="probes, similarity and separability on held-out speakers")
    _add_common(p, "JSON evaluation settings")
    p.add_argument("--run", type=Path, required=True, help="training output directory")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and joint loss")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=4, help="random configurations per case")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("report", help="collate runs into comparison.csv")
    _add_common(p)
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--plots", action="store_true", help="also write SVG loss curves")
    return parser


def _load_json(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return d


def resolve_train_config(args) -> TrainConfig:
    """Config file first, then command-line overrides."""
    d = _load_json(args.config)
    overrides = {
        "seed": args.seed,
        "speaker_loss": MODES.get(getattr(args, "mode", None)),
        "augment": None if getattr(args, "augment", None) is None else args.augment == "on",
        "stage1_steps": getattr(args, "stage1_steps", None),
        "stage2_steps": getattr(args, "stage2_steps", None),
        "speaker_weight": getattr(args, "lam", None),
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


def _dataclass_config(cls, args):
    d = _load_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args) -> Path:
    out = args.out if args.out is not None else default_output_root() / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, command: str, config: dict) -> None:
    text = json.dumps({"command": command, "config": config}, indent=2, sort_keys=True) + "\n"
    (out / "resolved_config.json").write_text(text, encoding="utf-8")


def cmd_datagen(args) -> None:
    dcfg = _dataclass_config(pipeline.DataConfig, args)
    out = _out_dir(args)
    _write_resolved(out, "datagen", dataclasses.asdict(dcfg))
    pipeline.datagen(out, dcfg)


def cmd_fit_units(args) -> None:
    cfg = resolve_train_config(args)
    out = _out_dir(args)
    _write_resolved(out, "fit-units", cfg.to_dict())
    path = pipeline.fit_units_step(args.data, cfg, out / "units.bin")
    log.info("codebook written to %s", path)


def cmd_train(args) -> None:
    cfg = resolve_train_config(args)
    out = _out_dir(args)
    _write_resolved(out, "train", cfg.to_dict())
    state = pipeline.train_step_files(args.data, cfg, args.units, out)
    log.info("finished at step %d; final loss %.4f", state.step, state.metrics[-1]["loss_total"])


def cmd_eval(args) -> None:
    ecfg = _dataclass_config(pipeline.EvalConfig, args)
    out = args.out if args.out is not None else args.run
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, "eval", dataclasses.asdict(ecfg))
    metrics = pipeline.eval_files(args.run, args.data, out, ecfg)
    for k in sorted(metrics):
        log.info("%s = %.4f", k, metrics[k])


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    _write_resolved(out, "gradcheck", {"seed": seed, "repeats": args.repeats, "tol": args.tol})
    results = gradcheck.run_suite(range(seed, seed + args.repeats))
    worst = max(r.max_rel_error for r in results)
    with open(out / "gradcheck.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("case,seed,max_rel_error\n")
        for r in results:
            fh.write(f"{r.name},{r.seed},{r.max_rel_error!r}\n")
    ok = worst < args.tol
    print(f"gradcheck: {len(results)} configurations, max relative error {worst:.3e} "
          f"({'pass' if ok else 'FAIL'} at tol {args.tol:g})", file=sys.stderr)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_report(args) -> None:
    out = _out_dir(args)
    _write_resolved(out, "report", {"runs": [str(r) for r in args.runs], "plots": args.plots})
    E.report(args.runs, out, plots=args.plots)


COMMANDS = {
    "datagen": cmd_datagen,
    "fit-units": cmd_fit_units,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        code = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"spkdistill {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SpkDistillError, OSError, ValueError, ArithmeticError) as exc:
        print(f"spkdistill {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
