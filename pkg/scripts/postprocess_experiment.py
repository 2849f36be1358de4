from __future__ import annotations

"""Ablate the post-processing stages on a test cohort seeded with SWAN distractor blobs."""

import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from clotseg.config.settings import ROOT_DIR, PostprocessConfig, load_settings
from clotseg.services.checkpoint import load_checkpoint
from clotseg.services.experiments import fit_model, make_cohort, predict_cohort, score_predictions
from clotseg.services.metrics import summary_row
from clotseg.services.postprocess import PostProcessor
from clotseg.services.reports import DEFAULT_REPORT_DIR, save_report
from clotseg.services.trainer import model_from_checkpoint

DEFAULT_CONFIG = ROOT_DIR / "configs" / "desk.yaml"
STAGES: List[Tuple[str, Dict[str, bool]]] = [
    ("small", {"use_small": True}),
    ("lesion", {"use_small": True, "use_lesion": True}),
    ("big", {"use_small": True, "use_lesion": True, "use_big": True}),
    ("growth", {"use_small": True, "use_lesion": True, "use_big": True, "use_growth": True}),
]


def stage_config(base: PostprocessConfig, enabled: Dict[str, bool]) -> PostprocessConfig:
    toggles = {key: enabled.get(key, False) for key in ("use_small", "use_lesion", "use_big", "use_growth")}
    return base.model_copy(update=toggles)


def run_postprocess_experiment(
    config_path: Path,
    overrides: list,
    *,
    checkpoint: Optional[Path] = None,
    n_train: int = 10,
    n_test: int = 10,
    distractors: int = 3,
    report_dir: Path = DEFAULT_REPORT_DIR,
    history_dir: Optional[Path] = None,
    tag: Optional[str] = None,
    progress: bool = False,
) -> Dict[str, Any]:
    settings = load_settings(config_path, overrides)
    seed = settings.resolved_seed
    cohort = make_cohort(settings, n_train, n_test, seed, test_distractors=distractors)
    if checkpoint is not None:
        model = model_from_checkpoint(load_checkpoint(checkpoint))
    else:
        model = fit_model(settings, cohort.train, progress=progress).model
    probs = predict_cohort(model, cohort.test)

    base_threshold = settings.postprocess.base_threshold
    connectivity = settings.postprocess.connectivity
    frames = {"raw": score_predictions(probs, cohort.test, base_threshold=base_threshold, connectivity=connectivity)}
    for name, enabled in STAGES:
        processor = PostProcessor(stage_config(settings.postprocess, enabled), settings.model.threshold)
        frames[name] = score_predictions(probs, cohort.test, processor, connectivity=connectivity)

    rows = [{"pipeline": name, **summary_row(frame)} for name, frame in frames.items()]
    summary = pd.DataFrame(rows)
    raw, full = summary.iloc[0], summary.iloc[-1]
    verdict = {
        "fewer_false_positives": bool(full["fp_count"] < raw["fp_count"]),
        "detection_kept": bool(full["detected"] >= raw["detected"]),
    }
    payload = {
        "config": str(config_path),
        "seed": seed,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "test_volumes": n_test,
        "distractors": distractors,
        "verdict": verdict,
    }
    save_report("postprocess", payload, summary, report_dir=report_dir, history_dir=history_dir, tag=tag)
    print(summary.to_string(index=False))
    return payload


def main() -> None:
    parser = argparse.ArgumentParser(description="Post-processing ablation on phantoms with distractor blobs")
    parser.add_argument("--config", default=str(DEFAULT_CONFIG), help="YAML config (defaults to configs/desk.yaml)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], help="Dotted key=value override")
    parser.add_argument("--checkpoint", default=None, help="Trained CSCK checkpoint; trains a fresh model when omitted")
    parser.add_argument("--train", type=int, default=10, help="Training phantoms when no checkpoint is given")
    parser.add_argument("--test", type=int, default=10, help="Test phantoms")
    parser.add_argument("--distractors", type=int, default=3, help="SWAN distractor blobs per test phantom")
    parser.add_argument("--output-dir", default=str(DEFAULT_REPORT_DIR), help="Directory for the latest report")
    parser.add_argument("--history-dir", default=str(DEFAULT_REPORT_DIR / "history"), help="Timestamped report directory")
    parser.add_argument("--tag", default=None, help="Custom label for this run")
    parser.add_argument("--progress", action="store_true", help="Show the training progress bar")
    args = parser.parse_args()

    run_postprocess_experiment(
        Path(args.config),
        args.overrides,
        checkpoint=Path(args.checkpoint) if args.checkpoint else None,
        n_train=args.train,
        n_test=args.test,
        distractors=args.distractors,
        report_dir=Path(args.output_dir),
        history_dir=Path(args.history_dir) if args.history_dir else None,
        tag=args.tag,
        progress=args.progress,
    )


if __name__ == "__main__":
    main()
