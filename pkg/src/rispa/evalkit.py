"""Experiment narratives: full pipeline runs, special cases, obstacle adaptation.

Everything here orchestrates the scene/dataio/engines stages into the three
stories the artifact exists to tell: (1) train a surrogate and an inverse
designer from "measured" data and score them closed-loop, (2) hit the named
power-allocation patterns, (3) degrade the system with an obstacle and show
that on-site re-collection plus retraining restores it.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dataio, engines
from .dataio import SCATTER_SPLIT, TARGET_SPLIT, SplitSpec, derive_seed
from .engines import EvalResult, FseModel, IdeModel
from .neural import TrainReport
from .quantizer import QuantizerConfig
from .scene import Scene, scene_digest, scenes_differ_only_in_obstacle, simulate

logger = logging.getLogger(__name__)

SPECIAL_CASES = (
    ("001", (0.0, 0.0, 0.55)),
    ("101", (0.55, 0.0, 0.55)),
    ("000", (0.0, 0.0, 0.0)),
)

SCATTER_CSV_COLUMNS = (
    "target_1", "target_2", "target_3",
    "predicted_1", "predicted_2", "predicted_3",
    "measured_1", "measured_2", "measured_3",
)


# ---------------------------------------------------------------------------
# Pipeline settings and presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineSettings:
    """Stage hyperparameters for one end-to-end run."""

    profile_count: int
    target_count: int
    epochs_fse: int
    epochs_ide: int
    lr_fse: float
    lr_ide: float
    batch_fse: int = 128
    batch_ide: int = 256
    temperature: float = 10.0
    noise_sigma: Optional[float] = None   # None keeps the scene's own value
    target_low: float = dataio.DEFAULT_TARGET_LOW
    target_high: float = dataio.DEFAULT_TARGET_HIGH
    scatter_split: SplitSpec = SCATTER_SPLIT
    target_split: SplitSpec = TARGET_SPLIT
    threads: int = 1


def desk_settings() -> PipelineSettings:
    """CI-scale preset: small counts, noiseless scene, faster learning rates."""
    return PipelineSettings(
        profile_count=2000,
        target_count=8000,
        epochs_fse=1000,
        epochs_ide=600,
        lr_fse=1e-3,
        lr_ide=2e-3,
        noise_sigma=0.0,
    )


def paper_settings() -> PipelineSettings:
    """Full-scale preset matching the reference training protocol."""
    return PipelineSettings(
        profile_count=10000,
        target_count=48000,
        epochs_fse=10000,
        epochs_ide=6000,
        lr_fse=1e-4,
        lr_ide=5e-4,
        batch_fse=256,
        noise_sigma=None,
    )


PRESETS = {"desk": desk_settings, "paper": paper_settings}


# seed derivation keys, one per randomness consumer
SEED_COLLECT = 0
SEED_SCATTER_SPLIT = 1
SEED_TARGETS = 2
SEED_FSE = 3
SEED_TARGET_SPLIT = 4
SEED_IDE = 5
SEED_EVAL_NOISE = 6
SEED_RECOLLECT = 10
SEED_REFSE = 11
SEED_REIDE = 12
SEED_REEVAL_NOISE = 13


def _apply_noise_override(scene: Scene, settings: PipelineSettings) -> Scene:
    if settings.noise_sigma is None or settings.noise_sigma == scene.noise_sigma:
        return scene
    return dataclasses.replace(scene, noise_sigma=settings.noise_sigma)


@dataclass
class PipelineResult:
    fse: FseModel
    ide: IdeModel
    fse_report: TrainReport
    ide_report: TrainReport
    fse_test_mse: float
    dataset: dataio.ScatterDataset
    target_splits: tuple          # (train, val, test) TargetDataset
    eval_result: EvalResult
    special_table: np.ndarray     # (3, 9)
    soft_hard_gap: float
    fraction_below: np.ndarray
    timings: dict                 # stage -> seconds
    seed: int


def run_pipeline(scene: Scene, settings: PipelineSettings, seed: int) -> PipelineResult:
    """collect -> train surrogate -> train inverse -> closed-loop eval.

    Every stage draws from a seed derived from ``seed`` and a fixed stage key,
    so the whole run is reproducible from (scene, settings, seed).
    """
    scene = _apply_noise_override(scene, settings)
    timings = {}

    t0 = time.perf_counter()
    dataset = dataio.collect(
        scene, settings.profile_count, derive_seed(seed, SEED_COLLECT), threads=settings.threads
    )
    timings["collect"] = time.perf_counter() - t0

    d_train, d_val, d_test = dataio.split(
        dataset, settings.scatter_split, derive_seed(seed, SEED_SCATTER_SPLIT)
    )
    t0 = time.perf_counter()
    fse, fse_report = engines.train_fse(
        d_train, d_val,
        epochs=settings.epochs_fse,
        learning_rate=settings.lr_fse,
        batch_size=settings.batch_fse,
        seed=derive_seed(seed, SEED_FSE),
    )
    timings["train_fse"] = time.perf_counter() - t0
    test_pred = engines.fse_predict(fse, d_test.profiles)
    fse_test_mse = float(np.mean((test_pred - d_test.normalized) ** 2))
    logger.info("surrogate test MSE %.5g on %d held-out records", fse_test_mse, len(d_test))

    targets = dataio.generate_targets(
        settings.target_count, settings.target_low, settings.target_high,
        seed=derive_seed(seed, SEED_TARGETS),
    )
    t_train, t_val, t_test = dataio.split(
        targets, settings.target_split, derive_seed(seed, SEED_TARGET_SPLIT)
    )
    t0 = time.perf_counter()
    ide, ide_report = engines.train_ide(
        fse, t_train, t_val,
        epochs=settings.epochs_ide,
        learning_rate=settings.lr_ide,
        batch_size=settings.batch_ide,
        seed=derive_seed(seed, SEED_IDE),
        qcfg=QuantizerConfig(temperature=settings.temperature),
    )
    timings["train_ide"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    eval_result = engines.closed_loop_eval(
        ide, fse, scene, t_test,
        noise_seed=derive_seed(seed, SEED_EVAL_NOISE),
        threads=settings.threads,
    )
    timings["eval"] = time.perf_counter() - t0

    _, special_table = run_special_cases(ide, fse, scene)
    gap = engines.soft_hard_gap_rms(ide, fse, t_test)

    return PipelineResult(
        fse=fse,
        ide=ide,
        fse_report=fse_report,
        ide_report=ide_report,
        fse_test_mse=fse_test_mse,
        dataset=dataset,
        target_splits=(t_train, t_val, t_test),
        eval_result=eval_result,
        special_table=special_table,
        soft_hard_gap=gap,
        fraction_below=dataset.fraction_below(),
        timings=timings,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Special cases
# ---------------------------------------------------------------------------

def run_special_cases(ide: IdeModel, fse: FseModel, scene: Scene):
    """Design and replay the named patterns; rows are (target, predicted, measured)."""
    names = []
    rows = []
    for name, target in SPECIAL_CASES:
        profile = engines.design_batch(ide, np.asarray(target))[0]
        predicted = engines.fse_predict(fse, profile)
        measured = simulate(scene, profile, fse.i_max)
        names.append(name)
        rows.append(np.concatenate([target, predicted, measured]))
    return names, np.vstack(rows)


# ---------------------------------------------------------------------------
# Obstacle adaptation study
# ---------------------------------------------------------------------------

@dataclass
class AdaptationReport:
    stale_mse: np.ndarray         # per probe: old models scored on the new scene
    retrained_mse: np.ndarray     # per probe: fresh models on the new scene
    baseline_mse: np.ndarray      # per probe: old models on their own scene
    collect_seconds: float
    train_seconds: float
    stale_table: np.ndarray
    retrained_table: np.ndarray
    baseline: PipelineResult
    retrained_fse: FseModel
    retrained_ide: IdeModel


def run_adaptation_study(
    scene_without: Scene,
    scene_with: Scene,
    settings: PipelineSettings,
    seed: int,
    warm_start: bool = False,
) -> AdaptationReport:
    """Train on the clean scene, watch it fail on the changed one, retrain on site.

    The two scenes must agree outside the obstacle block. The same target test
    split is reused for all three evaluations so the MSEs are comparable.
    Retraining draws fresh profiles and fresh seeds; ``warm_start`` initializes
    the retrained networks from the stale parameters instead of from scratch.
    """
    if not scenes_differ_only_in_obstacle(scene_without, scene_with):
        raise ValueError("scenes must differ only in the obstacle block")
    scene_with = _apply_noise_override(scene_with, settings)

    base = run_pipeline(scene_without, settings, seed)
    t_test = base.target_splits[2]

    stale = engines.closed_loop_eval(
        base.ide, base.fse, scene_with, t_test,
        noise_seed=derive_seed(seed, SEED_EVAL_NOISE),
        threads=settings.threads,
    )
    logger.info(
        "stale per-probe MSE on changed scene: %s",
        ", ".join(f"{v:.4g}" for v in stale.mse_measured),
    )

    t0 = time.perf_counter()
    new_data = dataio.collect(
        scene_with, settings.profile_count, derive_seed(seed, SEED_RECOLLECT),
        threads=settings.threads,
    )
    collect_seconds = time.perf_counter() - t0

    n_train, n_val, _ = dataio.split(
        new_data, settings.scatter_split, derive_seed(seed, SEED_SCATTER_SPLIT)
    )
    t0 = time.perf_counter()
    new_fse, _ = engines.train_fse(
        n_train, n_val,
        epochs=settings.epochs_fse,
        learning_rate=settings.lr_fse,
        batch_size=settings.batch_fse,
        seed=derive_seed(seed, SEED_REFSE),
        init=base.fse.mlp if warm_start else None,
    )
    new_ide, _ = engines.train_ide(
        new_fse, base.target_splits[0], base.target_splits[1],
        epochs=settings.epochs_ide,
        learning_rate=settings.lr_ide,
        batch_size=settings.batch_ide,
        seed=derive_seed(seed, SEED_REIDE),
        qcfg=QuantizerConfig(temperature=settings.temperature),
        init=base.ide.mlp if warm_start else None,
    )
    train_seconds = time.perf_counter() - t0

    retrained = engines.closed_loop_eval(
        new_ide, new_fse, scene_with, t_test,
        noise_seed=derive_seed(seed, SEED_REEVAL_NOISE),
        threads=settings.threads,
    )
    logger.info(
        "retrained per-probe MSE: %s (collect %.1fs, retrain %.1fs)",
        ", ".join(f"{v:.4g}" for v in retrained.mse_measured),
        collect_seconds, train_seconds,
    )

    return AdaptationReport(
        stale_mse=stale.mse_measured,
        retrained_mse=retrained.mse_measured,
        baseline_mse=base.eval_result.mse_measured,
        collect_seconds=collect_seconds,
        train_seconds=train_seconds,
        stale_table=stale.table,
        retrained_table=retrained.table,
        baseline=base,
        retrained_fse=new_fse,
        retrained_ide=new_ide,
    )


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _open_out(path):
    try:
        return open(path, "w", encoding="utf-8", newline="")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def export_scatter(table: np.ndarray, path, provenance: Optional[dict] = None) -> None:
    """Write an eval table as CSV: header plus one row per target.

    Floats carry 17 significant digits, so parsing the file recovers every
    value exactly. ``provenance`` adds a leading ``# key=value`` comment line.
    """
    table = np.asarray(table)
    if table.size == 0:
        raise ValueError("refusing to export an empty table")
    if table.ndim != 2 or table.shape[1] != len(SCATTER_CSV_COLUMNS):
        raise ValueError(f"table must have {len(SCATTER_CSV_COLUMNS)} columns")
    with _open_out(path) as f:
        if provenance:
            f.write("# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
        f.write(",".join(SCATTER_CSV_COLUMNS) + "\n")
        for row in table:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def export_history(report: TrainReport, path, provenance: Optional[dict] = None) -> None:
    """Write per-epoch loss history as CSV (epoch, train_mse, val_mse)."""
    if len(report.train_losses) == 0:
        raise ValueError("refusing to export an empty history")
    with _open_out(path) as f:
        if provenance:
            f.write("# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
        f.write("epoch,train_mse,val_mse\n")
        for i, (tr, va) in enumerate(zip(report.train_losses, report.val_losses)):
            f.write(f"{i},{_fmt(tr)},{_fmt(va)}\n")


# ---------------------------------------------------------------------------
# Run summary
# ---------------------------------------------------------------------------

@dataclass
class EvalSummary:
    """Flattened metrics of one pipeline run, for stdout and the summary file."""

    seed: int
    scene_hash: str
    mse_predicted: np.ndarray
    mse_measured: np.ndarray
    fse_val_mse: float
    fse_test_mse: float
    ide_val_mse: float
    soft_hard_gap: float
    fraction_below: np.ndarray
    special_table: np.ndarray
    timings: dict = field(default_factory=dict)

    def to_text(self) -> str:
        def vec(v):
            return ",".join(_fmt(x) for x in np.asarray(v).ravel())

        lines = [
            f"seed: {self.seed}",
            f"scene_digest: {self.scene_hash}",
            f"fse_val_mse: {_fmt(self.fse_val_mse)}",
            f"fse_test_mse: {_fmt(self.fse_test_mse)}",
            f"ide_val_mse: {_fmt(self.ide_val_mse)}",
            f"mse_predicted: {vec(self.mse_predicted)}",
            f"mse_measured: {vec(self.mse_measured)}",
            f"soft_hard_gap_rms: {_fmt(self.soft_hard_gap)}",
            f"fraction_below_0.6: {vec(self.fraction_below)}",
        ]
        for (name, _), row in zip(SPECIAL_CASES, self.special_table):
            lines.append(f"special_{name}_measured: {vec(row[6:9])}")
        for stage, secs in self.timings.items():
            lines.append(f"{stage}_seconds: {secs:.2f}")
        return "\n".join(lines) + "\n"


def summarize(result: PipelineResult, scene: Scene) -> EvalSummary:
    best = result.ide_report.best_epoch
    ide_val = (
        result.ide_report.val_losses[best]
        if 0 <= best < len(result.ide_report.val_losses)
        else float("nan")
    )
    fbest = result.fse_report.best_epoch
    fse_val = (
        result.fse_report.val_losses[fbest]
        if 0 <= fbest < len(result.fse_report.val_losses)
        else float("nan")
    )
    return EvalSummary(
        seed=result.seed,
        scene_hash=scene_digest(scene),
        mse_predicted=result.eval_result.mse_predicted,
        mse_measured=result.eval_result.mse_measured,
        fse_val_mse=fse_val,
        fse_test_mse=result.fse_test_mse,
        ide_val_mse=ide_val,
        soft_hard_gap=result.soft_hard_gap,
        fraction_below=result.fraction_below,
        special_table=result.special_table,
        timings=dict(result.timings),
    )
