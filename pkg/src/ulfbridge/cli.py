"""``ulfbridge`` command-line entry point.

Exit codes: 0 ok, 2 usage or invalid config, 3 I/O, 4 data contract,
5 numerical failure.  ``ULFBRIDGE_LOG`` selects the log level
(debug, info or warn).
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import (
    ContaminatedTeacherData,
    CorruptCheckpoint,
    IncompatibleCheckpoint,
    IncompleteCohort,
    InvalidConfig,
    NaNDetected,
    NumericalError,
    ShapeError,
    SplitLeakage,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("ulfbridge")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["mode", "metrics", "config"],
    "properties": {
        "mode": {"enum": ["paired", "unpaired"]},
        "config": {"type": "object"},
        "metrics": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["per_subject", "aggregate"],
                "properties": {
                    "per_subject": {"type": "object", "additionalProperties": {"type": "number"}},
                    "aggregate": {"type": "number"},
                },
            },
        },
    },
}


class UsageError(Exception):
    pass


def _configure_logging():
    level = os.environ.get("ULFBRIDGE_LOG", "warn").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING, "warning": logging.WARNING}
    if level not in levels:
        raise UsageError(f"ULFBRIDGE_LOG must be one of debug, info, warn (got {level!r})")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _echo_config(out, doc):
    """Record the effective configuration next to (or inside) an output."""
    out = Path(out)
    target = out / "effective_config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    _write_json(target, doc)


def _load_manifest(path):
    from .synth_data import DatasetManifest

    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return DatasetManifest.load(path)


# --- commands -------------------------------------------------------------------


def cmd_make_data(args):
    from .synth_data import build_cohorts

    if args.subjects < 1 or args.slices < 1:
        raise UsageError("--subjects and --slices must be >= 1")
    if args.size < 32 or args.size % 8:
        raise UsageError("--size must be a multiple of 8 and at least 32")
    if not 0 <= args.test_subjects <= args.subjects:
        raise UsageError("--test-subjects must lie in [0, --subjects]")
    split = {"source_frac": 0.5, "target_frac": 0.5, "paired_test_count": args.test_subjects}
    man = build_cohorts(args.out, args.subjects, args.slices, args.size, split=split, seed=args.seed)
    _echo_config(Path(args.out), {"command": "make-data", **_namespace(args)})
    print(man.path)


def cmd_pretrain_teacher(args):
    from .diffusion import TeacherConfig, save_score_model, train_teacher

    man = _load_manifest(args.data)
    if "target_pool" not in man.cohorts or not man.cohorts["target_pool"]:
        raise IncompleteCohort("manifest has no target_pool")
    config = TeacherConfig(seed=args.seed, **({"steps": args.steps} if args.steps is not None else {}))
    if config.steps < 1:
        raise UsageError("--steps must be >= 1")
    teacher = train_teacher(man.slices("target_pool"), config)
    save_score_model(args.out, teacher, {"teacher_config": asdict(config)})
    _echo_config(Path(args.out), {"command": "pretrain-teacher", "teacher_config": asdict(config), **_namespace(args)})
    print(args.out)


def cmd_train_encoder(args):
    from .metrics import EncoderConfig, save_encoder, train_feature_encoder

    man = _load_manifest(args.data)
    if "target_pool" not in man.cohorts or not man.cohorts["target_pool"]:
        raise IncompleteCohort("manifest has no target_pool")
    config = EncoderConfig(seed=args.seed, **({"steps": args.steps} if args.steps is not None else {}))
    enc = train_feature_encoder(man.slices("target_pool"), config)
    save_encoder(args.out, enc)
    _echo_config(Path(args.out), {"command": "train-encoder", "encoder_config": asdict(config), **_namespace(args)})
    print(args.out)


def _train_config(args):
    from .trainer import TrainConfig, config_from_dict

    if args.config is None:
        config = TrainConfig()
    else:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{args.config} is not valid JSON: {exc}") from exc
        config = config_from_dict(doc)
    overrides = {"seed": args.seed}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **overrides)


def cmd_train(args):
    from .diffusion import load_score_model
    from .trainer import train

    man = _load_manifest(args.data)
    teacher = load_score_model(args.teacher) if args.teacher else None
    if teacher is not None and teacher.role != "teacher_real":
        raise UsageError(f"{args.teacher} holds a {teacher.role} model, not a teacher")
    if args.resume:
        config = None
    else:
        config = _train_config(args)
        if config.uses_critic and teacher is None:
            raise UsageError("this configuration needs --teacher")
    steps = args.steps if args.resume else None
    state, _ = train(config, man, teacher, out_dir=args.out, resume_from=args.resume, total_steps=steps)
    _echo_config(Path(args.out), {"command": "train", "train_config": asdict(state.config), **_namespace(args)})
    print(Path(args.out) / "final.safetensors")
    log.info("finished at step %d", state.global_step)


def _make_translator(ckpt_path):
    from .trainer import identity_translator, load_translator

    if ckpt_path == "identity":
        return identity_translator
    return load_translator(ckpt_path)


def _read_inputs(spec, cohort):
    """Returns a list of (name, (N, 3, H, W) array, manifest entry or None)."""
    from .synth_data import _read_stack, compose_channels

    path = Path(spec)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ShapeError(f"{path}: expected an (N, 3, H, W) array")
        return [(path.stem, arr, None)]
    man = _load_manifest(path)
    if cohort not in man.cohorts:
        raise IncompleteCohort(f"manifest has no cohort {cohort!r}")
    out = []
    for entry in man.cohorts[cohort]:
        shape = tuple(entry["shape"])
        t1, t2 = (_read_stack(man.root / entry["files"][k], shape) for k in ("t1", "t2"))
        out.append((entry["subject_id"], compose_channels(t1, t2), entry))
    return out


def cmd_translate(args):
    from .synth_data import _write_stack

    translator = _make_translator(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in args.input:
        for name, images, _ in _read_inputs(spec, args.cohort):
            y = translator(images)
            t1, t2 = 0.5 * (y[:, 0] + y[:, 2]), y[:, 1]
            files = {}
            for key, arr in (("t1", t1), ("t2", t2)):
                rel = f"{name}_{key}.f32"
                _write_stack(out_dir / rel, arr)
                files[key] = rel
            entries.append({"subject_id": name, "shape": list(t1.shape), "files": files})
    _write_json(out_dir / "translated.json", {"version": 1, "dtype": "<f4", "subjects": entries})
    _echo_config(out_dir, {"command": "translate", **_namespace(args)})
    print(f"translated {sum(e['shape'][0] for e in entries)} slices -> {out_dir}")


def cmd_evaluate(args):
    import jsonschema

    from .metrics import evaluate_paired, evaluate_unpaired, load_encoder

    if args.mode == "unpaired" and not args.encoder:
        raise UsageError("unpaired evaluation needs --encoder")
    translator = _make_translator(args.ckpt)
    man = _load_manifest(args.data)
    if args.mode == "paired":
        metrics = evaluate_paired(translator, man, use_clean_inputs=args.inputs == "clean", cohort=args.cohort)
    else:
        encoder = load_encoder(args.encoder)
        source = man.slices(args.cohort, clean=args.inputs == "clean")
        metrics = evaluate_unpaired(translator, source, man.slices("target_pool"), encoder)
    report = {"mode": args.mode, "metrics": metrics, "config": _namespace(args)}
    jsonschema.validate(report, REPORT_SCHEMA)
    _write_json(args.out, report)
    _echo_config(Path(args.out), {"command": "evaluate", **_namespace(args)})
    for name, value in metrics.items():
        print(f"{name}: {value['aggregate']:.6f}")


def cmd_oracle_check(args):
    from .oracles import run_suite

    torch.manual_seed(args.seed)
    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# --- parser -----------------------------------------------------------------------


def _namespace(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser():
    p = argparse.ArgumentParser(prog="ulfbridge", description="Unpaired ULF-to-HF MRI translation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None, help="random seed (default 0; for train, overrides the config)")
        sp.set_defaults(func=func)
        return sp

    sp = add("make-data", cmd_make_data, "generate synthetic phantom cohorts")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, default=85)
    sp.add_argument("--slices", type=int, default=8)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--test-subjects", type=int, default=5)

    sp = add("pretrain-teacher", cmd_pretrain_teacher, "fit the frozen target-domain teacher")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)

    sp = add("train-encoder", cmd_train_encoder, "fit the frozen evaluation feature encoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)

    sp = add("train", cmd_train, "run the bridge training loop")
    sp.add_argument("--data", required=True)
    sp.add_argument("--teacher")
    sp.add_argument("--config", help="training config JSON (see `ulfbridge schema`)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, help="override total_steps")
    sp.add_argument("--batch-size", type=int, help="override batch_size")
    sp.add_argument("--resume", help="train-state checkpoint to resume from")

    sp = add("translate", cmd_translate, "translate slices with a trained checkpoint")
    sp.add_argument("--ckpt", required=True, help="checkpoint path or 'identity'")
    sp.add_argument("--input", required=True, nargs="+", help="manifest(s) or .npy (N,3,H,W) arrays")
    sp.add_argument("--cohort", default="paired_test")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "paired or unpaired evaluation report")
    sp.add_argument("--ckpt", required=True, help="checkpoint path or 'identity'")
    sp.add_argument("--data", required=True)
    sp.add_argument("--encoder")
    sp.add_argument("--mode", choices=("paired", "unpaired"), required=True)
    sp.add_argument("--inputs", choices=("degraded", "clean"), default="degraded")
    sp.add_argument("--cohort", default="paired_test")
    sp.add_argument("--out", required=True)

    sp = add("oracle-check", cmd_oracle_check, "run analytic oracle suites")
    sp.add_argument("--suite", choices=("kl_grad", "edt", "schedule", "gradcheck", "all"), default="all")

    sp = add("schema", lambda a: print(json.dumps(_schema(), indent=2)), "print the training config schema")
    return p


def _schema():
    from .trainer import config_schema

    return config_schema()


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        _configure_logging()
        if args.seed is None and args.command != "train":
            args.seed = 0
        torch.manual_seed(args.seed or 0)
        code = args.func(args)
        return EXIT_OK if code is None else code
    # contract errors subclass ValueError, so they are matched before usage errors
    except (OSError, CorruptCheckpoint, IncompatibleCheckpoint) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IncompleteCohort, SplitLeakage, ContaminatedTeacherData, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, InvalidConfig, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NaNDetected as exc:
        print(f"numerical failure: {exc} (last good checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
