"""Command line entry point: ``ccreid gen-toy | train | eval``.

Exit codes:
  0  success
  1  runtime failure (bad manifest, corrupted checkpoint, ...)
  2  usage error or missing config file
  3  output directory is non-empty and --force was not given
  4  stage 2 requested without a stage-1 checkpoint
  5  protocol cannot be evaluated on this dataset
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import load_toy_spec, load_training_config
from .errors import CheckpointError, ConfigurationError, EvaluationError, ManifestError

logger = logging.getLogger("ccreid")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NOT_EMPTY, EXIT_NO_STAGE1, EXIT_PROTOCOL = 0, 1, 2, 3, 4, 5
CONFIG_SNAPSHOT = "config.ini"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(loader, path):
    try:
        return loader(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    except ConfigurationError as e:
        raise CliError(EXIT_USAGE, f"invalid config: {e}") from None


def _is_empty(path: Path) -> bool:
    return not path.exists() or not any(path.iterdir())


def prepare_run_dir(out: Path, config_path, force: bool, seed: int) -> None:
    """Create ``out`` with a byte-identical config snapshot and an environment record.

    A non-empty directory is accepted when it already holds the same config
    snapshot (continuing a run: stage 2 after stage 1, or a resume).
    """
    config_bytes = Path(config_path).read_bytes()
    snapshot = out / CONFIG_SNAPSHOT
    if not _is_empty(out) and not force:
        if not snapshot.exists() or snapshot.read_bytes() != config_bytes:
            raise CliError(EXIT_NOT_EMPTY, f"{out} is not empty and holds a different run; use --force")
    out.mkdir(parents=True, exist_ok=True)
    snapshot.write_bytes(config_bytes)
    from .evaluation import rank
    env = {"seed": seed, "version": __version__, "python": platform.python_version(),
           "torch": torch.__version__, "numpy": np.__version__, "rank_backend": rank.BACKEND}
    (out / "env.json").write_text(json.dumps(env, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- gen-toy


def cmd_gen_toy(args) -> int:
    from .toybench import generate, plant_confound_check

    spec = _load_config(load_toy_spec, args.config)
    out = Path(args.out)
    if not _is_empty(out):
        if not args.force:
            raise CliError(EXIT_NOT_EMPTY, f"{out} is not empty; use --force to regenerate")
        # only clear what a previous generation wrote
        for sub in ("images", "parsing"):
            shutil.rmtree(out / sub, ignore_errors=True)
    try:
        manifest = generate(spec, out)
    except ConfigurationError as e:
        raise CliError(EXIT_USAGE, f"invalid toy spec: {e}") from None
    shutil.copyfile(args.config, out / CONFIG_SNAPSHOT)
    report = plant_confound_check(manifest)
    (out / "confound.json").write_text(json.dumps(report, indent=1) + "\n")
    print(f"manifest={out / 'manifest.tsv'}")
    print(f"records={len(manifest.records)} K={manifest.K} K_c={manifest.K_c}")
    print(f"clothes_accuracy={report['clothes_accuracy']:.4f} "
          f"biometric_accuracy={report['biometric_accuracy']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _manifest_for(cfg):
    from .data import load_manifest

    if not cfg.manifest:
        raise CliError(EXIT_USAGE, "config has no [data] manifest")
    return load_manifest(cfg.manifest)


def _stage1_ref(args, cfg, out: Path):
    from .trainer import CheckpointRef

    candidates = [args.stage1_ckpt, cfg.stage1_checkpoint, str(out / "checkpoints" / "stage1.pt")]
    for path in candidates:
        if path and Path(path).exists():
            return CheckpointRef.from_path(path)
        if path and path != candidates[-1]:
            raise CliError(EXIT_NO_STAGE1, f"stage-1 checkpoint not found: {path}")
    raise CliError(EXIT_NO_STAGE1, "stage 2 needs a stage-1 checkpoint (--stage1-ckpt, "
                   "[train] stage1_checkpoint, or checkpoints/stage1.pt in the run directory)")


def cmd_train(args) -> int:
    from .trainer import (TrainData, build_model, freeze_for_stage1, prompt_diagnostics, resume,
                          run_stage1, run_stage2)

    cfg = _load_config(load_training_config, args.config)
    out = Path(args.out)
    stage1_ref = _stage1_ref(args, cfg, out) if args.stage == 2 else None
    prepare_run_dir(out, args.config, args.force, cfg.seed)
    manifest = _manifest_for(cfg)
    data = TrainData(manifest, cfg.image_size, cfg.clothes_label_set, cfg.workers)

    resume_from = None
    if args.resume:
        model, resume_from, meta = resume(args.resume, cfg)
        if meta["stage"] != args.stage:
            raise CliError(EXIT_USAGE, f"{args.resume} is a stage-{meta['stage']} checkpoint")
        if meta["K"] != manifest.K or meta["K_c"] != manifest.K_c:
            raise CliError(EXIT_FAIL, "checkpoint label counts do not match the manifest")
    elif args.stage == 1:
        model = build_model(cfg, manifest.K, manifest.K_c)
    else:
        model, _, _ = resume(stage1_ref, cfg)

    if args.stage == 1:
        freeze_for_stage1(model)
        ref = run_stage1(cfg, manifest, model, out, data=data, resume_from=resume_from,
                         stop_after=args.stop_after)
        diag = prompt_diagnostics(model, data, cfg)
        lines = [f"{k}={v:.4f}" for k, v in diag.items()]
        (out / "reports").mkdir(exist_ok=True)
        (out / "reports" / "stage1_prompts.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    else:
        ref = run_stage2(cfg, manifest, model, stage1_ref, out, data=data, resume_from=resume_from,
                         stop_after=args.stop_after)
    print(f"checkpoint={ref.path}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _default_run_dir(ckpt: Path) -> Path:
    return ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt.parent


def cmd_eval(args) -> int:
    from .evaluation import extract_features, format_report, get_protocol, score, write_distance_csv
    from .errors import ContractError
    from .trainer import CheckpointRef, resume

    cfg = _load_config(load_training_config, args.config)
    protocols = args.protocol or ["general"]
    for name in protocols:
        try:
            get_protocol(name)
        except ContractError as e:
            raise CliError(EXIT_USAGE, str(e)) from None
    ckpt = Path(args.ckpt)
    ref = CheckpointRef.from_path(ckpt)
    model, _, meta = resume(ref, cfg)
    out = Path(args.out) if args.out else _default_run_dir(ckpt)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    manifest = _manifest_for(cfg)
    query, gallery = manifest.split("query"), manifest.split("gallery")
    if not query or not gallery:
        raise CliError(EXIT_PROTOCOL, "manifest has no query or no gallery records")

    cache = out / "features"
    cache.mkdir(exist_ok=True)
    tag = ref.hash[:16]
    qf, qm = extract_features(model.raw_handle, query, cfg.image_size, workers=cfg.workers,
                              cache_path=cache / f"{tag}_query.pt")
    gf, gm = extract_features(model.raw_handle, gallery, cfg.image_size, workers=cfg.workers,
                              cache_path=cache / f"{tag}_gallery.pt")
    failed = []
    for name in protocols:
        try:
            result = score(qf.numpy(), gf.numpy(), qm, gm, name)
        except EvaluationError as e:
            print(f"protocol {name!r} cannot be evaluated on {manifest.name}: {e}", file=sys.stderr)
            failed.append(name)
            continue
        text = format_report({name: result}, {"checkpoint": ckpt, "stage": meta["stage"],
                                              "epoch": meta["epoch"]})
        (out / "reports" / f"eval_{name}.txt").write_text(text)
        if args.distances:
            write_distance_csv(result, qm, gm, out / "reports" / f"distances_{name}.csv")
        sys.stdout.write(text)
    return EXIT_PROTOCOL if failed else EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccreid", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate the synthetic benchmark")
    p.add_argument("--config", required=True, help="INI file with a [toy] section")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="regenerate into a non-empty directory")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint of an interrupted run of the same stage")
    p.add_argument("--stage1-ckpt", help="stage-1 checkpoint for --stage 2")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (checkpoint kept)")
    p.add_argument("--force", action="store_true", help="reuse a non-empty directory of another run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the query/gallery split")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--protocol", action="append",
                   help="general, cloth-changing or same-clothes; repeatable (default: general)")
    p.add_argument("--out", help="run directory for reports (default: the checkpoint's)")
    p.add_argument("--distances", action="store_true", help="also write per-pair distance CSVs")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        return e.code
    except (ManifestError, CheckpointError, ConfigurationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
