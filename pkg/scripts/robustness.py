from __future__ import annotations

"""Missing-modality robustness: no-dropout baseline versus modality dropout over keep probabilities and seeds.

Each seed trains on a fresh phantom cohort and scores the held-out volumes twice, once with every
modality and once with the droppable ones blacked out. ``--slices`` repeats the comparison for
several crop depths.
"""

import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from clotseg.config.settings import ROOT_DIR, Settings, load_settings, with_overrides  # noqa: E402
from clotseg.core.logger import get_logger  # noqa: E402
from clotseg.services.experiments import Cohort, fit_model, make_cohort, predict_cohort, score_predictions  # noqa: E402
from clotseg.services.metrics import summary_row  # noqa: E402
from clotseg.services.reports import DEFAULT_REPORT_DIR, save_report  # noqa: E402

logger = get_logger("clotseg.scripts.robustness")

DEFAULT_CONFIG = ROOT_DIR / "configs" / "desk.yaml"
MIN_GAP = 0.15
MAX_FULL_LOSS = 0.1
REFERENCE_KEEP_PROB = 0.5


def _variants(keep_probs: Sequence[float], classic: bool) -> List[Dict[str, Any]]:
    variants = [{"variant": "baseline", "keep_prob": 1.0, "gradual": False, "overrides": ["moddrop.enabled=false"]}]
    for p in keep_probs:
        variants.append(
            {"variant": "gradual", "keep_prob": p, "gradual": True, "overrides": [f"moddrop.keep_prob={p}", "moddrop.gradual=true"]}
        )
        if classic:
            variants.append(
                {"variant": "classic", "keep_prob": p, "gradual": False, "overrides": [f"moddrop.keep_prob={p}", "moddrop.gradual=false"]}
            )
    return variants


def _evaluate(settings: Settings, cohort: Cohort, progress: bool) -> Dict[str, float]:
    trainer = fit_model(settings, cohort.train, progress=progress)
    row: Dict[str, float] = {}
    for label, missing in (("full", ()), ("missing", settings.moddrop.droppable)):
        probs = predict_cohort(trainer.model, cohort.test, missing)
        summary = summary_row(score_predictions(probs, cohort.test, base_threshold=settings.postprocess.base_threshold))
        row[f"dice_{label}"] = summary["dice"]
        row[f"detected_{label}"] = summary["detected"]
    return row


def robustness_verdict(frame: pd.DataFrame) -> Dict[str, Any]:
    """Per seed and depth: does the baseline lose Dice, does gradual dropout win half of it back, and stay close on full input."""
    verdicts = []
    for (seed, s), group in frame.groupby(["seed", "s"]):
        base = group[group["variant"] == "baseline"].iloc[0]
        ref = group[(group["variant"] == "gradual") & (group["keep_prob"] == REFERENCE_KEEP_PROB)]
        if ref.empty:
            continue
        ref = ref.iloc[0]
        gap = base["dice_full"] - base["dice_missing"]
        clauses = {
            "baseline_drops": bool(gap >= MIN_GAP),
            "recovers_half": bool(ref["dice_missing"] - base["dice_missing"] >= gap / 2),
            "full_preserved": bool(abs(ref["dice_full"] - base["dice_full"]) <= MAX_FULL_LOSS),
        }
        verdicts.append({"seed": int(seed), "s": int(s), "gap": float(gap), **clauses, "passed": all(clauses.values())})
    passed = sum(v["passed"] for v in verdicts)
    return {"runs": verdicts, "majority_passed": bool(verdicts) and passed * 2 > len(verdicts)}


def plot_curve(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    gradual = frame[frame["variant"] == "gradual"].groupby("keep_prob")[["dice_full", "dice_missing"]].mean()
    baseline = frame[frame["variant"] == "baseline"][["dice_full", "dice_missing"]].mean()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(gradual.index, gradual["dice_full"], marker="o", label="gradual dropout, all modalities")
    ax.plot(gradual.index, gradual["dice_missing"], marker="o", label="gradual dropout, modality missing")
    ax.axhline(baseline["dice_full"], linestyle="--", color="grey", label="no dropout, all modalities")
    ax.axhline(baseline["dice_missing"], linestyle=":", color="grey", label="no dropout, modality missing")
    ax.set_xlabel("keep probability p")
    ax.set_ylabel("mean test Dice")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def run_robustness(
    config_path: Path,
    overrides: list,
    *,
    seeds: Sequence[int] = (0, 1, 2),
    keep_probs: Sequence[float] = (REFERENCE_KEEP_PROB,),
    slices: Optional[Sequence[int]] = None,
    classic: bool = False,
    n_train: int = 40,
    n_test: int = 10,
    report_dir: Path = DEFAULT_REPORT_DIR,
    history_dir: Optional[Path] = None,
    tag: Optional[str] = None,
    progress: bool = False,
) -> Dict[str, Any]:
    settings = load_settings(config_path, overrides)
    depths = list(slices) if slices else [settings.model.s]
    rows = []
    for seed in seeds:
        cohort = make_cohort(settings, n_train, n_test, seed)
        for s in depths:
            for variant in _variants(keep_probs, classic):
                run_settings = with_overrides(settings, [f"seed={seed}", f"model.s={s}", *variant["overrides"]])
                scores = _evaluate(run_settings, cohort, progress)
                rows.append(
                    {"seed": seed, "s": s, **{k: v for k, v in variant.items() if k != "overrides"}, **scores}
                )
                logger.info("seed=%d s=%d %s p=%.2f -> %s", seed, s, variant["variant"], variant["keep_prob"], scores)

    frame = pd.DataFrame(rows)
    verdict = robustness_verdict(frame)
    curve = plot_curve(frame, report_dir / "robustness-curve.png")
    payload = {
        "config": str(config_path),
        "seeds": list(seeds),
        "keep_probs": list(keep_probs),
        "slices": depths,
        "train_volumes": n_train,
        "test_volumes": n_test,
        "missing": list(settings.moddrop.droppable),
        "verdict": verdict,
        "curve": str(curve),
    }
    save_report("robustness", payload, frame, report_dir=report_dir, history_dir=history_dir, tag=tag)
    print(f"Robustness finished for {len(rows)} runs. Majority passed: {verdict['majority_passed']}")
    return payload


def main() -> None:
    parser = argparse.ArgumentParser(description="Missing-modality robustness on synthetic phantom cohorts")
    parser.add_argument("--config", default=str(DEFAULT_CONFIG), help="YAML config (defaults to configs/desk.yaml)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], help="Dotted key=value override")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="Cohort and training seeds")
    parser.add_argument("--keep-probs", type=float, nargs="+", default=[REFERENCE_KEEP_PROB], help="Keep probabilities to sweep")
    parser.add_argument("--slices", type=int, nargs="*", default=None, help="Crop depths s to compare")
    parser.add_argument("--classic", action="store_true", help="Also train all-or-nothing modality dropout")
    parser.add_argument("--train", type=int, default=40, help="Training phantoms per seed")
    parser.add_argument("--test", type=int, default=10, help="Test phantoms per seed")
    parser.add_argument("--output-dir", default=str(DEFAULT_REPORT_DIR), help="Directory for the latest report")
    parser.add_argument("--history-dir", default=str(DEFAULT_REPORT_DIR / "history"), help="Timestamped report directory")
    parser.add_argument("--tag", default=None, help="Custom label for this run")
    parser.add_argument("--progress", action="store_true", help="Show per-run progress bars")
    args = parser.parse_args()

    run_robustness(
        Path(args.config),
        args.overrides,
        seeds=args.seeds,
        keep_probs=args.keep_probs,
        slices=args.slices,
        classic=args.classic,
        n_train=args.train,
        n_test=args.test,
        report_dir=Path(args.output_dir),
        history_dir=Path(args.history_dir) if args.history_dir else None,
        tag=args.tag,
        progress=args.progress,
    )


if __name__ == "__main__":
    main()
