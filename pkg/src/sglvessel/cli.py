"""Command-line entry points.

    sgl forge erase       synthesize erased labels from complete ones
    sgl run               one SGL training run on a dataset
    sgl evaluate          metrics for a stored run on the test split
    sgl grid              run the full (r, K) experiment grid
    sgl report            tables / curves / panels from a grid
    sgl export-enhancement  save learned enhancement maps as images
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import data, erasure, evaluate, model, reports, sgl
from .model import ModelConfig

log = logging.getLogger(__name__)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


@main.group()
def forge():
    """Label noise synthesis."""


@forge.command("erase")
@click.option("--ratio", type=float, required=True, help="fraction of thick segments to keep")
@click.option("--seed", type=int, default=0)
@click.option("--thin-keep", type=float, default=0.5)
@click.option("--in", "in_dir", type=click.Path(exists=True), required=True,
              help="directory of binary label images")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def forge_erase(ratio, seed, thin_keep, in_dir, out_dir):
    """Erase thin vessel segments from every label in a directory."""
    cfg = erasure.ErasureConfig(ratio=ratio, thin_keep_fraction=thin_keep, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"ratio": ratio, "seed": seed, "thin_keep_fraction": thin_keep, "images": {}}
    for path in sorted(Path(in_dir).iterdir()):
        if path.suffix.lower() not in data.IMAGE_EXTENSIONS:
            continue
        label = data.binarize_label(np.asarray(Image.open(path)))
        result = erasure.erase_labels(label, cfg, path.stem)
        Image.fromarray(result.mask * 255).save(out / f"{path.stem}.png")
        manifest["images"][path.stem] = {
            "segments": len(result.kept_ids) + len(result.erased_ids),
            "cover_width": result.cover_width,
            "kept": result.kept_ids,
            "erased": result.erased_ids,
        }
        click.echo(f"{path.stem}: kept {len(result.kept_ids)}, erased {len(result.erased_ids)}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _sgl_config(k, lam, erase_ratio, seed, epochs, crop, steps=100, batch=8, base_channels=32):
    source = (
        sgl.LabelSource(kind="clean")
        if erase_ratio >= 1.0
        else sgl.LabelSource(kind="erased", ratio=erase_ratio, seed=seed)
    )
    return sgl.SGLConfig(
        K=k,
        lambda_=lam,
        member_epochs=epochs,
        final_epochs=epochs,
        steps_per_epoch=steps,
        batch_size=batch,
        label_source=source,
        fold_seed=seed,
        data_seed=seed,
        model=ModelConfig(base_channels=base_channels, seed=seed),
        augmentation=sgl.AugmentationConfig(crop=crop),
    )


@main.command("run")
@click.option("--dataset", type=click.Choice(sorted(data.DATASET_SHAPES)), required=True)
@click.option("--root", type=click.Path(exists=True), required=True)
@click.option("--k", type=int, default=8)
@click.option("--lambda", "lam", type=float, default=1.0)
@click.option("--erase-ratio", type=float, default=1.0)
@click.option("--seed", type=int, default=0)
@click.option("--epochs", type=int, default=20)
@click.option("--crop", type=int, default=256)
@click.option("--steps-per-epoch", type=int, default=100)
@click.option("--batch-size", type=int, default=8)
@click.option("--base-channels", type=int, default=32)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def run_cmd(dataset, root, k, lam, erase_ratio, seed, epochs, crop,
            steps_per_epoch, batch_size, base_channels, out_dir):
    """One SGL training run; writes checkpoints, pseudo labels, and a manifest."""
    samples = data.load_dataset(root, dataset)
    train, _ = data.train_test_split(samples)
    cfg = _sgl_config(k, lam, erase_ratio, seed, epochs, crop,
                      steps_per_epoch, batch_size, base_channels)
    final, members, pseudo, assignment = sgl.run_sgl(train, cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(final, out / "final.pt")
    for ckpt in members:
        model.save_checkpoint(ckpt, out / f"member_{ckpt.fold}.pt")
    store = data.MapStore(out, run="pseudo")
    if pseudo is not None:
        for sid, pmap in pseudo.maps.items():
            store.save(data.StoredMap(sample_id=sid, kind="pseudo_label", data=pmap,
                                      meta={"fold": pseudo.producer[sid]}))
    manifest = {
        "dataset": dataset,
        "config": {
            "K": k, "lambda": lam, "erase_ratio": erase_ratio, "seed": seed,
            "epochs": epochs, "crop": crop,
        },
        "folds": assignment.folds,
        "trained_on": final.trained_on,
        "members": {str(c.fold): c.trained_on for c in members},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    click.echo(f"run complete: {out}")


@main.command("evaluate")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", type=click.Choice(sorted(data.DATASET_SHAPES)), required=True)
@click.option("--root", type=click.Path(exists=True), required=True)
@click.option("--threshold", type=float, default=0.5)
@click.option("--fov", is_flag=True, help="restrict metrics to the field-of-view mask")
@click.option("--out", "out_file", type=click.Path(), default=None)
def evaluate_cmd(run_dir, dataset, root, threshold, fov, out_file):
    """Evaluate a run's final checkpoint on the clean test split (TSV output)."""
    samples = data.load_dataset(root, dataset)
    _, test = data.train_test_split(samples)
    ckpt = model.load_checkpoint(Path(run_dir) / "final.pt")
    report = evaluate.evaluate_model(model.model_from_checkpoint(ckpt), test,
                                     threshold=threshold, use_fov=fov)
    cols = ("sample_id",) + reports.METRIC_COLUMNS
    lines = ["\t".join(cols)]
    for row in report.per_image + [report.micro, report.macro]:
        lines.append("\t".join([row.sample_id] + [
            f"{getattr(row, m):.4f}" if getattr(row, m) is not None else "—"
            for m in reports.METRIC_COLUMNS
        ]))
    text = "\n".join(lines) + "\n"
    if out_file:
        Path(out_file).write_text(text)
    click.echo(text)


@main.command("grid")
@click.option("--dataset", type=click.Choice(sorted(data.DATASET_SHAPES)), required=True)
@click.option("--root", type=click.Path(exists=True), required=True)
@click.option("--ratios", default="1,0.9,0.7,0.5")
@click.option("--ks", default="1,2,4,8")
@click.option("--seed", type=int, default=0)
@click.option("--epochs", type=int, default=20)
@click.option("--crop", type=int, default=256)
@click.option("--steps-per-epoch", type=int, default=100)
@click.option("--batch-size", type=int, default=8)
@click.option("--base-channels", type=int, default=32)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def grid_cmd(dataset, root, ratios, ks, seed, epochs, crop,
             steps_per_epoch, batch_size, base_channels, out_dir):
    """Run the (r, K) grid; completed cells are skipped on resume."""
    samples = data.load_dataset(root, dataset)
    grid = reports.ExperimentGrid(
        dataset=dataset,
        out_dir=Path(out_dir),
        ratios=tuple(float(x) for x in ratios.split(",")),
        ks=tuple(int(x) for x in ks.split(",")),
        seed=seed,
    )
    cfg = _sgl_config(1, 1.0, 1.0, seed, epochs, crop,
                      steps_per_epoch, batch_size, base_channels)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "grid_config.json").write_text(json.dumps({
        "dataset": dataset, "ratios": list(grid.ratios), "ks": list(grid.ks),
        "seed": seed, "epochs": epochs, "crop": crop,
        "steps_per_epoch": steps_per_epoch, "batch_size": batch_size,
        "base_channels": base_channels,
    }, indent=2))
    reports.run_grid(grid, samples, cfg, keep_checkpoints=True)
    click.echo(reports.emit_tables(grid))


@main.group()
def report():
    """Emit tables, curves, or panels from a completed grid."""


def _load_grid(grid_dir: str, dataset: str) -> reports.ExperimentGrid:
    base = Path(grid_dir) / dataset
    cells = []
    for d in base.glob("r*_k*"):
        if (d / "metrics.json").exists():
            r_part, k_part = d.name[1:].split("_k")
            cells.append((float(r_part), int(k_part)))
    if not cells:
        raise click.ClickException(f"no completed cells under {base}")
    grid = reports.ExperimentGrid(
        dataset=dataset,
        out_dir=Path(grid_dir),
        ratios=tuple(sorted({c[0] for c in cells}, reverse=True)),
        ks=tuple(sorted({c[1] for c in cells})),
    )
    for r, k in cells:
        grid.results[(r, k)] = reports._load_cell(grid, r, k)
    return grid


@report.command("tables")
@click.option("--grid", "grid_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", required=True)
def report_tables(grid_dir, dataset):
    click.echo(reports.emit_tables(_load_grid(grid_dir, dataset)))


@report.command("curves")
@click.option("--grid", "grid_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", required=True)
def report_curves(grid_dir, dataset):
    for p in reports.emit_curves(_load_grid(grid_dir, dataset)):
        click.echo(str(p))


@report.command("panels")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", required=True)
@click.option("--root", type=click.Path(exists=True), required=True)
@click.option("--samples", "sample_ids", default="", help="comma-separated ids (default: all test)")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def report_panels(run_dir, dataset, root, sample_ids, out_dir):
    all_samples = data.load_dataset(root, dataset)
    _, test = data.train_test_split(all_samples)
    if sample_ids:
        wanted = set(sample_ids.split(","))
        unknown = wanted - {s.id for s in all_samples}
        if unknown:
            raise click.ClickException(f"unknown samples: {sorted(unknown)}")
        test = [s for s in all_samples if s.id in wanted]
    ckpt = model.load_checkpoint(Path(run_dir) / "final.pt")
    for p in reports.emit_panels(model.model_from_checkpoint(ckpt), test, out_dir):
        click.echo(str(p))


@main.command("export-enhancement")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--dataset", required=True)
@click.option("--root", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def export_enhancement(run_dir, dataset, root, out_dir):
    """Write the learned 3-channel enhancement maps as 8-bit images."""
    samples = data.load_dataset(root, dataset)
    ckpt = model.load_checkpoint(Path(run_dir) / "final.pt")
    net = model.model_from_checkpoint(ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        _, enhanced = evaluate.predict_full(sample, net)
        Image.fromarray(np.round(enhanced * 255).astype(np.uint8)).save(
            out / f"{sample.id}_enhanced.png"
        )
        click.echo(sample.id)


if __name__ == "__main__":
    main()
