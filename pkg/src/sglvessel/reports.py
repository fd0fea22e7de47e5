"""Experiment grid over (erase ratio r, fold count K) and report emission.

Each grid cell erases the training labels at r (r = 1 skips erasure,
erased labels are shared across all K cells of the same r), runs SGL with
K (K = 1 is the baseline), and evaluates on the clean test split.
Completed cells persist a metrics JSON and are skipped on resume.
Tables, curves, and qualitative panels are pure views of the stored
metrics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .data import RetinalSample, train_test_split
from .evaluate import MetricsRow, binarize, evaluate_model, predict_full
from .model import VesselNet, model_from_checkpoint, save_checkpoint
from .sgl import LabelSource, SGLConfig, resolve_labels, run_sgl

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("accuracy", "auc", "sensitivity", "specificity", "dice", "vessel_iou")

DEFAULT_RATIOS = (1.0, 0.9, 0.7, 0.5)
DEFAULT_KS = (1, 2, 4, 8)


@dataclass
class ExperimentGrid:
    dataset: str
    out_dir: Path
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    ks: tuple[int, ...] = DEFAULT_KS
    seed: int = 0
    threshold: float = 0.5
    results: dict[tuple[float, int], MetricsRow] = field(default_factory=dict)

    def cell_dir(self, r: float, k: int) -> Path:
        return Path(self.out_dir) / self.dataset / f"r{r:g}_k{k}"

    def cell_done(self, r: float, k: int) -> bool:
        return (self.cell_dir(r, k) / "metrics.json").exists()


def _save_cell(grid: ExperimentGrid, r: float, k: int, row: MetricsRow, extra: dict) -> None:
    d = grid.cell_dir(r, k)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.json").write_text(json.dumps({**row.as_dict(), **extra}, indent=2))


def _load_cell(grid: ExperimentGrid, r: float, k: int) -> MetricsRow:
    blob = json.loads((grid.cell_dir(r, k) / "metrics.json").read_text())
    fields = {f: blob[f] for f in MetricsRow.__dataclass_fields__ if f in blob}
    return MetricsRow(**fields)


def run_grid(
    grid: ExperimentGrid,
    samples: list[RetinalSample],
    base_cfg: SGLConfig | None = None,
    keep_checkpoints: bool = False,
) -> ExperimentGrid:
    """Execute every pending (r, K) cell; per-cell failures are recorded
    and the grid continues."""
    base_cfg = base_cfg or SGLConfig()
    train, test = train_test_split(samples)
    for r in grid.ratios:
        source = (
            LabelSource(kind="clean")
            if r >= 1.0
            else LabelSource(kind="erased", ratio=r, seed=grid.seed)
        )
        labels = None  # erased once per (r, seed), shared across all K cells
        for k in sorted(grid.ks):
            if grid.cell_done(r, k):
                grid.results[(r, k)] = _load_cell(grid, r, k)
                continue
            log.info("running grid cell r=%g K=%d", r, k)
            cfg = replace(base_cfg, K=k, label_source=source, fold_seed=grid.seed)
            try:
                if labels is None:
                    labels = resolve_labels(train, source)
                final, _, _, _ = run_sgl(train, cfg, train_labels=labels)
                report = evaluate_model(
                    model_from_checkpoint(final), test, threshold=grid.threshold
                )
                if keep_checkpoints:
                    save_checkpoint(final, grid.cell_dir(r, k) / "final.pt")
                row = report.micro
                _save_cell(grid, r, k, row, {"status": "ok", "r": r, "K": k})
                grid.results[(r, k)] = row
            except Exception as exc:  # per-cell failures must not kill the grid
                log.exception("grid cell r=%g K=%d failed", r, k)
                d = grid.cell_dir(r, k)
                d.mkdir(parents=True, exist_ok=True)
                (d / "error.json").write_text(json.dumps({"error": str(exc)}))
    return grid


def emit_tables(grid: ExperimentGrid) -> str:
    """Render the (r, K) metrics table, r descending then K ascending;
    missing cells are marked with a dash."""
    header = ["r", "K", "Accuracy", "AUC", "Sensitivity", "Specificity", "DICE", "Vessel IoU"]
    lines = ["\t".join(header)]
    for r in sorted(grid.ratios, reverse=True):
        for k in sorted(grid.ks):
            row = grid.results.get((r, k))
            if row is None:
                cells = ["—"] * len(METRIC_COLUMNS)
            else:
                cells = [f"{getattr(row, m):.4f}" if getattr(row, m) is not None else "—" for m in METRIC_COLUMNS]
            lines.append("\t".join([f"{r:g}", str(k)] + cells))
    return "\n".join(lines) + "\n"


def emit_curves(grid: ExperimentGrid, metrics: tuple[str, ...] = ("dice", "auc")) -> list[Path]:
    """One figure per metric: metric vs K, one line per ratio r."""
    out = Path(grid.out_dir) / grid.dataset / "curves"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(5, 4))
        for r in sorted(grid.ratios, reverse=True):
            ks = [k for k in sorted(grid.ks) if (r, k) in grid.results]
            vals = [getattr(grid.results[(r, k)], metric) for k in ks]
            pts = [(k, v) for k, v in zip(ks, vals) if v is not None]
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"r={r:g}")
        ax.set_xlabel("K")
        ax.set_ylabel(metric.upper())
        ax.set_title(f"{grid.dataset}: {metric.upper()} vs K")
        ax.legend()
        path = out / f"{metric}.png"
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def error_overlay(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Binarized map with false negatives in red and false positives in green."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    h, w = pred.shape
    panel = np.zeros((h, w, 3), dtype=np.uint8)
    panel[pred & gt] = (255, 255, 255)
    panel[~pred & gt] = (255, 0, 0)  # false negative
    panel[pred & ~gt] = (0, 255, 0)  # false positive
    return panel


def emit_panels(
    model: VesselNet,
    samples: list[RetinalSample],
    out_dir: str | Path,
    threshold: float = 0.5,
) -> list[Path]:
    """Four-column strip per sample: raw | enhancement | probability | errors."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for sample in samples:
        prob, enhanced = predict_full(sample, model)
        raw = np.round(sample.image * 255).astype(np.uint8)
        enh = np.round(enhanced * 255).astype(np.uint8)
        prob8 = np.round(prob * 255).astype(np.uint8)
        prob_rgb = np.stack([prob8] * 3, axis=-1)
        errors = error_overlay(binarize(prob, threshold), sample.label)
        strip = np.concatenate([raw, enh, prob_rgb, errors], axis=1)
        path = out / f"{sample.id}_panel.png"
        Image.fromarray(strip).save(path)
        paths.append(path)
    return paths
