"""Study Group Learning: K-fold member training, pseudo-label inference,
and final joint-loss training.

The training set is split into K near-equal folds.  Member k trains on
everything except fold k with plain per-pixel binary cross entropy; its
predictions on the held-out fold become that fold's pseudo labels (so no
sample is ever pseudo-labeled by a model that saw it).  A final model is
then trained from scratch on the joint loss

    L = BCE(prediction, label) + lambda * BCE(prediction, pseudo label)

where the label source may be the clean annotations or erased ones.
Pseudo labels are kept soft by default; a hard(threshold) mode exists for
ablation.  K = 1 degenerates to the baseline with no pseudo term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import AugmentationConfig, sample_patch
from .data import RetinalSample
from .erasure import ErasureConfig, erase_labels
from .evaluate import predict_full
from .model import (
    ModelCheckpoint,
    ModelConfig,
    VesselNet,
    loss_bce,
    make_checkpoint,
    model_from_checkpoint,
)

log = logging.getLogger(__name__)


class FoldError(ValueError):
    """Invalid fold configuration."""


class LeakageError(RuntimeError):
    """A pseudo label was produced by a model that trained on its sample."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class FoldAssignment:
    K: int
    folds: list[list[str]]  # K disjoint id lists covering the training set
    seed: int

    def holdout(self, k: int) -> list[str]:
        return list(self.folds[k])

    def complement(self, k: int) -> list[str]:
        return [i for j, fold in enumerate(self.folds) if j != k for i in fold]


@dataclass
class LabelSource:
    kind: str = "clean"  # "clean" | "erased"
    ratio: float = 1.0
    seed: int = 0
    thin_keep_fraction: float = 0.5


@dataclass
class SGLConfig:
    K: int = 2
    lambda_: float = 1.0
    member_epochs: int = 1
    final_epochs: int = 1
    steps_per_epoch: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    cosine_decay: bool = True
    label_source: LabelSource = field(default_factory=LabelSource)
    pseudo_label_form: str = "soft"  # "soft" | "hard"
    hard_threshold: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    fold_seed: int = 0
    data_seed: int = 0

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")


@dataclass
class PseudoLabelSet:
    maps: dict[str, np.ndarray]  # sample_id -> pseudo label in [0,1]^(H x W)
    producer: dict[str, int]  # sample_id -> fold index that inferred it


def split_folds(train_ids: list[str], K: int, seed: int) -> FoldAssignment:
    """Random K-way partition with fold sizes differing by at most one."""
    if K < 1:
        raise FoldError(f"K must be >= 1, got {K}")
    if K > len(train_ids):
        raise FoldError(f"K={K} exceeds the {len(train_ids)} training samples")
    rng = np.random.default_rng(seed)
    shuffled = list(np.array(sorted(train_ids))[rng.permutation(len(train_ids))])
    folds = [shuffled[k::K] for k in range(K)]
    return FoldAssignment(K=K, folds=folds, seed=seed)


def resolve_labels(samples: list[RetinalSample], source: LabelSource) -> dict[str, np.ndarray]:
    """Materialize training labels per the configured source."""
    if source.kind == "clean" or source.ratio >= 1.0:
        return {s.id: s.label for s in samples}
    cfg = ErasureConfig(
        ratio=source.ratio, thin_keep_fraction=source.thin_keep_fraction, seed=source.seed
    )
    return {s.id: erase_labels(s.label, cfg, s.id).mask for s in samples}


def _patch_to_tensors(img, labs):
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()
    ys = {k: torch.from_numpy(np.ascontiguousarray(v)).float() for k, v in labs.items()}
    return x, ys


def _train_loop(
    model: VesselNet,
    samples: list[RetinalSample],
    labels: dict[str, dict[str, np.ndarray]],
    cfg: SGLConfig,
    epochs: int,
    lambda_: float,
    rng: np.random.Generator,
) -> int:
    """SGD over random augmented patches; returns the number of steps run.

    ``labels[sample_id]`` maps label names to maps; "gt" is required and
    "pseudo" (when present) contributes lambda * BCE.
    """
    model.train()
    total_steps = epochs * cfg.steps_per_epoch
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1))
        if cfg.cosine_decay
        else None
    )
    step = 0
    for _ in range(epochs):
        for _ in range(cfg.steps_per_epoch):
            xs, gts, pseudos = [], [], []
            for _ in range(cfg.batch_size):
                s = samples[int(rng.integers(0, len(samples)))]
                img, labs, _ = sample_patch(s.image, labels[s.id], cfg.augmentation, rng)
                x, ys = _patch_to_tensors(img, labs)
                xs.append(x)
                gts.append(ys["gt"])
                if "pseudo" in ys:
                    pseudos.append(ys["pseudo"])
            x = torch.stack(xs)
            gt = torch.stack(gts).unsqueeze(1)
            _, prob = model(x)
            loss = loss_bce(prob, gt)
            if pseudos:
                loss = loss + lambda_ * loss_bce(prob, torch.stack(pseudos).unsqueeze(1))
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            step += 1
    return step


def train_member(
    k: int,
    assignment: FoldAssignment,
    samples: list[RetinalSample],
    cfg: SGLConfig,
    train_labels: dict[str, np.ndarray] | None = None,
) -> ModelCheckpoint:
    """Train member k on everything outside fold k with plain BCE."""
    by_id = {s.id: s for s in samples}
    member_ids = assignment.complement(k) if assignment.K > 1 else assignment.folds[0]
    member_samples = [by_id[i] for i in member_ids]
    if train_labels is None:
        train_labels = resolve_labels(member_samples, cfg.label_source)
    labels = {i: {"gt": train_labels[i]} for i in member_ids}

    model_cfg = ModelConfig(**{**cfg.model.__dict__, "seed": cfg.model.seed + 1000 * (k + 1)})
    model = VesselNet(model_cfg)
    rng = np.random.default_rng([cfg.data_seed, k])
    steps = _train_loop(model, member_samples, labels, cfg, cfg.member_epochs, 0.0, rng)
    return make_checkpoint(model, trained_on=sorted(member_ids), fold=k, step=steps)


class CheckpointMember:
    """Adapter giving a checkpoint the predict/trained_on surface SGL needs."""

    def __init__(self, ckpt: ModelCheckpoint):
        self.trained_on = list(ckpt.trained_on)
        self.fold = ckpt.fold
        self._model = model_from_checkpoint(ckpt)

    def predict(self, sample: RetinalSample) -> np.ndarray:
        prob, _ = predict_full(sample, self._model)
        return prob


def infer_pseudo(
    assignment: FoldAssignment,
    members: dict[int, object],
    samples: list[RetinalSample],
    form: str = "soft",
    hard_threshold: float = 0.5,
) -> PseudoLabelSet:
    """Each held-out fold is pseudo-labeled by its own member.

    ``members[k]`` must expose ``trained_on`` (ids) and ``predict(sample)``.
    Raises LeakageError if a member would label a sample it trained on.
    """
    by_id = {s.id: s for s in samples}
    maps: dict[str, np.ndarray] = {}
    producer: dict[str, int] = {}
    for k in range(assignment.K):
        member = members[k]
        trained = set(member.trained_on)
        for sid in assignment.holdout(k):
            if sid in trained and assignment.K > 1:
                raise LeakageError(f"member {k} trained on {sid} but would pseudo-label it")
            pred = np.asarray(member.predict(by_id[sid]), dtype=np.float64)
            if form == "hard":
                pred = (pred >= hard_threshold).astype(np.float64)
            maps[sid] = pred
            producer[sid] = k
    return PseudoLabelSet(maps=maps, producer=producer)


def train_final(
    samples: list[RetinalSample],
    pseudo: PseudoLabelSet | None,
    cfg: SGLConfig,
    train_labels: dict[str, np.ndarray] | None = None,
) -> ModelCheckpoint:
    """Train the final model from scratch on label + lambda * pseudo BCE."""
    ids = sorted(s.id for s in samples)
    if train_labels is None:
        train_labels = resolve_labels(samples, cfg.label_source)
    use_pseudo = pseudo is not None and cfg.K > 1 and cfg.lambda_ > 0
    if use_pseudo:
        missing = [i for i in ids if i not in pseudo.maps]
        if missing:
            raise FoldError(f"missing pseudo labels for samples {missing}")
    labels = {
        i: {"gt": train_labels[i], **({"pseudo": pseudo.maps[i]} if use_pseudo else {})}
        for i in ids
    }
    model = VesselNet(ModelConfig(**{**cfg.model.__dict__, "seed": cfg.model.seed + 7}))
    rng = np.random.default_rng([cfg.data_seed, 999])
    lambda_ = cfg.lambda_ if use_pseudo else 0.0
    steps = _train_loop(model, samples, labels, cfg, cfg.final_epochs, lambda_, rng)
    return make_checkpoint(model, trained_on=ids, fold=None, step=steps)


def run_sgl(
    samples: list[RetinalSample],
    cfg: SGLConfig,
    train_labels: dict[str, np.ndarray] | None = None,
) -> tuple[ModelCheckpoint, list[ModelCheckpoint], PseudoLabelSet | None, FoldAssignment]:
    """Full SGL pipeline on a training set: folds, members, pseudo, final.

    ``train_labels`` lets a caller reuse labels erased once per (r, seed)
    across several runs; by default they are resolved from the config.
    """
    ids = sorted(s.id for s in samples)
    assignment = split_folds(ids, cfg.K, cfg.fold_seed)
    if train_labels is None:
        train_labels = resolve_labels(samples, cfg.label_source)
    pseudo = None
    member_ckpts: list[ModelCheckpoint] = []
    if cfg.K > 1:
        for k in range(cfg.K):
            log.info("training member %d/%d", k + 1, cfg.K)
            member_ckpts.append(train_member(k, assignment, samples, cfg, train_labels))
        members = {c.fold: CheckpointMember(c) for c in member_ckpts}
        pseudo = infer_pseudo(
            assignment, members, samples, cfg.pseudo_label_form, cfg.hard_threshold
        )
    log.info("training final model")
    final = train_final(samples, pseudo, cfg, train_labels)
    return final, member_ckpts, pseudo, assignment
