"""Command-line entry point: ``python -m clotseg <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from clotseg import __version__
from clotseg.config.settings import Settings, SynthConfig, flatten_settings, load_settings
from clotseg.core.errors import CheckpointMismatchError, ClotsegError, ConfigError
from clotseg.core.file_utils import list_volumes, require_paths
from clotseg.core.logger import get_logger, set_level
from clotseg.data.mvol import read_mvol, write_mvol
from clotseg.data.phantom import generate_phantom, phantom_rng
from clotseg.data.standardize import LandmarkModel, standardize
from clotseg.layers.upattllstm import UpAttLLSTM
from clotseg.models.schemas import LESION, MODALITIES, PROB_CHANNEL, THROMBUS, Volume
from clotseg.services.checkpoint import load_checkpoint
from clotseg.services.gradcheck_suite import CHECKS, TOLERANCE, run_suite
from clotseg.services.inference import Segmenter
from clotseg.services.metrics import cohort_frame, score_patient, write_report
from clotseg.services.postprocess import PostProcessor, binarize
from clotseg.services.trainer import model_from_checkpoint, resume_transfer, train, training_rng
from clotseg.tensor.tensor import DEFAULT_DTYPE

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2
INVALID_ERRORS = (ConfigError, ValidationError, CheckpointMismatchError, FileNotFoundError, NotADirectoryError)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def print_run_header(settings: Settings, stream=None) -> None:
    """Print the resolved seed and config as ``# key=value`` lines; enough to replay the run."""
    stream = stream or sys.stdout
    print(f"# seed={settings.resolved_seed}", file=stream)
    for key, value in flatten_settings(settings).items():
        print(f"# {key}={value}", file=stream)
    stream.flush()


def _lesion_from(volume: Volume, threshold: float = 0.5) -> Optional[np.ndarray]:
    if volume.gt_lesion is not None:
        return volume.gt_lesion
    if PROB_CHANNEL in volume.modalities:
        return binarize(volume.modalities[PROB_CHANNEL], threshold)
    return None


def _prediction_volume(source: Volume, prob: np.ndarray, mask: np.ndarray) -> Volume:
    masks = {THROMBUS: mask}
    if source.gt_lesion is not None:
        masks[LESION] = source.gt_lesion
    return Volume(modalities={PROB_CHANNEL: prob}, spacing=source.spacing, masks=masks)


def _inputs(path: Path) -> List[Path]:
    require_paths([path])
    return list_volumes(path) if path.is_dir() else [path]


# -- subcommands -------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, settings: Settings) -> int:
    spec = settings.synth
    if args.spec:
        spec = _load_synth_spec(Path(args.spec), spec)
    out_dir = Path(args.out) if args.out else settings.data_path
    seed = settings.resolved_seed
    for index in range(args.count):
        volume = generate_phantom(spec, phantom_rng(seed, index))
        path = write_mvol(volume, out_dir / f"phantom-{index:04d}.mvol")
        print(path)
    logger.info("Generated %d phantoms in %s (seed=%d)", args.count, out_dir, seed)
    return EXIT_OK


def _load_synth_spec(path: Path, base: SynthConfig) -> SynthConfig:
    require_paths([path])
    with path.open("r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping of synth keys")
    data = data.get("synth", data)
    data = {str(key).removeprefix("synth."): value for key, value in data.items()}
    try:
        return SynthConfig(**{**base.model_dump(), **data})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    data_dir = Path(args.data) if args.data else settings.data_path
    paths = _inputs(data_dir)
    if not paths:
        raise FileNotFoundError(f"No .mvol volumes found in {data_dir}")
    volumes = [read_mvol(path) for path in paths]
    checkpoint_dir = settings.checkpoint_path
    log_path = settings.train_log_path
    rng = training_rng(settings.resolved_seed)

    if settings.train.resume_path:
        ckpt = load_checkpoint(settings.train.resume_path)
        landmarks = LandmarkModel(ckpt.landmarks) if ckpt.landmarks else LandmarkModel.fit(volumes)
        ckpt.landmarks = landmarks.references
        volumes = [standardize(vol, landmarks) for vol in volumes]
        # an explicit --seed replaces the generator stored in the checkpoint
        final = resume_transfer(
            ckpt,
            settings,
            volumes,
            rng=rng if args.seed is not None else None,
            checkpoint_dir=checkpoint_dir,
            log_path=log_path,
            progress=not args.quiet,
        )
    else:
        landmarks = LandmarkModel.fit(volumes)
        volumes = [standardize(vol, landmarks) for vol in volumes]
        model = UpAttLLSTM.from_settings(settings, dtype=DEFAULT_DTYPE)
        logger.info("Model has %d parameters", model.parameter_count())
        final = train(
            model,
            volumes,
            settings,
            rng=rng,
            landmarks=landmarks.references,
            checkpoint_dir=checkpoint_dir,
            log_path=log_path,
            progress=not args.quiet,
        )
    print(f"epochs={final.epoch} checkpoint={checkpoint_dir / 'latest.csck'} log={log_path}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace, settings: Settings) -> int:
    unknown = sorted(set(args.missing) - set(MODALITIES))
    if unknown:
        raise ConfigError(f"--missing got unknown modalities {unknown}; expected a subset of {list(MODALITIES)}")
    require_paths([Path(args.checkpoint)])
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    landmarks = LandmarkModel(ckpt.landmarks) if ckpt.landmarks else None
    segmenter = Segmenter(
        model,
        PostProcessor(settings.postprocess, settings.model.threshold),
        landmarks,
        stride=settings.model.stride,
    )
    out_dir = Path(args.out)
    for path in _inputs(Path(args.input)):
        volume = read_mvol(path)
        prob, mask = segmenter.segment(volume, args.missing)
        written = write_mvol(_prediction_volume(volume, prob, mask), out_dir / path.name)
        logger.info("%s: %d thrombus voxels", path.name, int(mask.sum()))
        print(written)
    return EXIT_OK


def cmd_postprocess(args: argparse.Namespace, settings: Settings) -> int:
    require_paths([Path(args.prob)] + ([Path(args.lesion)] if args.lesion else []))
    source = read_mvol(args.prob)
    if PROB_CHANNEL not in source.modalities:
        raise ConfigError(f"{args.prob} has no {PROB_CHANNEL} channel (found {list(source.modalities)})")
    prob = source.modalities[PROB_CHANNEL]
    lesion = _lesion_from(read_mvol(args.lesion)) if args.lesion else source.gt_lesion
    mask = PostProcessor(settings.postprocess, settings.model.threshold).refine(prob, lesion, source.spacing)
    print(write_mvol(_prediction_volume(source, prob, mask), Path(args.out)))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_paths = _inputs(gt_dir)
    require_paths([pred_dir / path.name for path in gt_paths])
    scores = []
    for gt_path in gt_paths:
        gt_volume = read_mvol(gt_path)
        pred_volume = read_mvol(pred_dir / gt_path.name)
        if gt_volume.gt_thrombus is None:
            raise ConfigError(f"{gt_path} carries no {THROMBUS} mask")
        pred = pred_volume.gt_thrombus
        if pred is None:
            pred = binarize(pred_volume.modalities[PROB_CHANNEL], settings.postprocess.base_threshold)
        scores.append(score_patient(gt_path.stem, pred, gt_volume.gt_thrombus, settings.postprocess.connectivity))
    frame = cohort_frame(scores)
    if args.out:
        print(write_report(frame, Path(args.out)))
    else:
        frame.to_csv(sys.stdout, index=False, na_rep="NA", float_format="%.6f")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, settings: Settings) -> int:
    results = run_suite(seed=settings.resolved_seed, names=args.names or None, h=args.step)
    frame = pd.DataFrame(
        [{"check": r.name, "error": r.error, "seconds": round(r.seconds, 3), "passed": r.passed} for r in results]
    )
    print(frame.to_string(index=False))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("Gradient checks above %.0e: %s", TOLERANCE, ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, Settings], int]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "postprocess": cmd_postprocess,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config file (defaults to CLOTSEG_CONFIG_PATH or configs/config.yaml)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override a config key, e.g. llstm.n_l=9")
    common.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Verbosity of the clotseg loggers")

    parser = _Parser(prog="clotseg", description="Thrombus segmentation with gradual modality dropout")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    synth = sub.add_parser("synth", parents=[common], help="Generate deterministic phantom volumes")
    synth.add_argument("--count", type=int, default=1, help="Number of phantoms")
    synth.add_argument("--seed", type=int, default=None, help="Base seed (overrides config and CLOTSEG_SEED)")
    synth.add_argument("--out", default=None, help="Output directory (defaults to paths.data_dir)")
    synth.add_argument("--spec", default=None, help="YAML file with synth keys overriding the config section")

    trainer = sub.add_parser("train", parents=[common], help="Train (or resume with train.resume_path) a model")
    trainer.add_argument("--data", default=None, help="Directory of training .mvol files (defaults to paths.data_dir)")
    trainer.add_argument("--resume", default=None, help="Checkpoint to fine-tune (sets train.resume_path)")
    trainer.add_argument("--epochs", type=int, default=None, help="Shortcut for --set train.epochs=N")
    trainer.add_argument("--seed", type=int, default=None, help="Training seed")
    trainer.add_argument("--quiet", action="store_true", help="Disable the progress bar")

    evaluate = sub.add_parser("eval", parents=[common], help="Score predictions against ground truth")
    evaluate.add_argument("--pred", required=True, help="Directory of predicted .mvol files")
    evaluate.add_argument("--gt", required=True, help="Directory of ground-truth .mvol files (matched by name)")
    evaluate.add_argument("--out", default=None, help="CSV report path (stdout when omitted)")

    infer = sub.add_parser("infer", parents=[common], help="Segment volumes with a trained checkpoint")
    infer.add_argument("--checkpoint", required=True, help="CSCK checkpoint")
    infer.add_argument("--input", required=True, help=".mvol file or directory")
    infer.add_argument("--out", required=True, help="Output directory for PROB/thrombus volumes")
    infer.add_argument("--missing", nargs="*", default=[], help="Modalities to treat as absent, e.g. PHASE")

    post = sub.add_parser("postprocess", parents=[common], help="Refine a probability map into a thrombus mask")
    post.add_argument("--prob", required=True, help=".mvol holding a PROB channel")
    post.add_argument("--lesion", default=None, help=".mvol holding a lesion mask or lesion PROB channel")
    post.add_argument("--npixels", type=int, default=None, help="Minimum component size")
    post.add_argument("--ndist", type=float, default=None, help="Lesion-distance tolerance")
    post.add_argument("--threshold", type=float, default=None, help="Growth threshold T")
    post.add_argument("--big", type=float, default=None, help="Keep components at least this fraction of the biggest")
    post.add_argument("--out", required=True, help="Output .mvol path")

    grad = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every layer")
    grad.add_argument("--names", nargs="*", default=[], choices=[name for name, _ in CHECKS], help="Subset of checks")
    grad.add_argument("--step", type=float, default=1e-5, help="Central-difference step h")
    grad.add_argument("--seed", type=int, default=None, help="Seed for the random inputs")
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    flags = {
        "seed": getattr(args, "seed", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.resume_path": getattr(args, "resume", None),
        "postprocess.n_pixels": getattr(args, "npixels", None),
        "postprocess.n_dist": getattr(args, "ndist", None),
        "model.threshold": getattr(args, "threshold", None),
        "postprocess.alpha_big": getattr(args, "big", None),
    }
    return [f"{key}={value}" for key, value in flags.items() if value is not None]


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.log_level:
        set_level(args.log_level)
    try:
        settings = load_settings(
            Path(args.config) if args.config else None,
            overrides=[*args.overrides, *_flag_overrides(args)],
        )
        print_run_header(settings)
        return COMMANDS[args.command](args, settings)
    except INVALID_ERRORS as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except ClotsegError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001
        logger.exception("%s failed unexpectedly", args.command)
        return EXIT_RUNTIME


__all__ = ["COMMANDS", "EXIT_INVALID", "EXIT_OK", "EXIT_RUNTIME", "build_parser", "main", "print_run_header"]
