"""Two-phase training with best-validation checkpointing, and clip evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .ingest import Manifest, load_clip_frames
from .metrics import metrics
from .model import TwoStreamNet
from .optim import NonFiniteError, Optimizer, class_weights, clip_grad_norm
from .sampler import SplitMix64, subsample_indices

ENCODER_PREFIXES = ("rgb_encoder.", "mask_encoder.")
GRAD_CLIP = 5.0


class PlanError(ValueError):
    pass


@dataclass
class Phase:
    epochs: int
    lr: float
    freeze: list[str] = field(default_factory=list)  # parameter-name prefixes

    def __post_init__(self):
        if self.epochs < 0:
            raise PlanError(f"phase epochs must be >= 0, got {self.epochs}")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise PlanError(f"phase learning rate must be finite and >= 0, got {self.lr}")

    def frozen(self, names) -> set[str]:
        return {n for n in names if any(n.startswith(p) for p in self.freeze)}


@dataclass
class TrainPlan:
    phases: list[Phase] = field(default_factory=lambda: [
        Phase(30, 1e-3, list(ENCODER_PREFIXES)), Phase(30, 1e-4, [])])
    batch_size: int = 4  # 0 means full batch
    seed: int = 0
    class_weighting: bool = True
    optimizer: str = "radam"

    def __post_init__(self):
        self.phases = [p if isinstance(p, Phase) else Phase(**p) for p in self.phases]
        if not self.phases:
            raise PlanError("a plan needs at least one phase")
        if self.batch_size < 0:
            raise PlanError("batch_size must be >= 0")
        if self.optimizer not in ("radam", "adam"):
            raise PlanError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainPlan":
        known = {"phases", "batch_size", "seed", "class_weighting", "optimizer"}
        unknown = set(obj) - known
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------
# in-memory clips
# ---------------------------------------------------------------------

@dataclass
class ClipData:
    clip_ids: list[str]
    labels: np.ndarray
    rgb: list[np.ndarray]  # per clip (n, h, w, 3) uint8
    mask: list[np.ndarray] | None
    num_classes: int

    def __len__(self):
        return len(self.clip_ids)

    def subset(self, idx) -> "ClipData":
        idx = list(idx)
        return ClipData([self.clip_ids[i] for i in idx], self.labels[idx],
                        [self.rgb[i] for i in idx],
                        None if self.mask is None else [self.mask[i] for i in idx],
                        self.num_classes)

    def batch(self, idx, k: int, rng: SplitMix64):
        """Stack sub-sampled clips; RGB and mask of one clip share frame indices."""
        rgb, mask = [], []
        for i in idx:
            sel = subsample_indices(len(self.rgb[i]), k, rng).zero_based()
            rgb.append(self.rgb[i][sel])
            if self.mask is not None:
                mask.append(self.mask[i][sel])
        return np.stack(rgb), (np.stack(mask) if self.mask is not None else None)


def load_clips(manifest: Manifest, split: str | None, resolution: int,
               with_masks: bool = True) -> ClipData:
    clips = manifest.clips if split is None else manifest.split(split)
    rgb, mask = [], []
    for c in clips:
        rgb.append(load_clip_frames(c.frame_paths, resolution))
        if with_masks:
            if c.mask_paths is None:
                raise ValueError(f"clip {c.clip_id!r} has no mask stream; run encode-masks first")
            mask.append(load_clip_frames(c.mask_paths, resolution))
    return ClipData([c.clip_id for c in clips], np.array([c.label for c in clips], dtype=np.int64),
                    rgb, mask if with_masks else None, manifest.num_classes)


# ---------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------

EVAL_STREAM = 0x5EC0DE


def predict(net: TwoStreamNet, data: ClipData, seed: int = 0, batch_size: int = 16):
    """Class probabilities (n, C) with deterministic frame sampling."""
    rng = SplitMix64(seed ^ EVAL_STREAM)
    out = []
    use_mask = not net.config.single_stream
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        rgb, mask = data.batch(idx, net.config.k, rng)
        out.append(net.forward(rgb, mask if use_mask else None))
    return np.concatenate(out) if out else np.zeros((0, data.num_classes))


def evaluate(net: TwoStreamNet, data: ClipData, seed: int = 0, weights: np.ndarray | None = None) -> dict:
    probs = predict(net, data, seed)
    preds = probs.argmax(axis=1)
    picked = probs[np.arange(len(data)), data.labels]
    w = np.ones(len(data)) if weights is None else weights[data.labels]
    loss = float(np.mean(-w * np.log(np.maximum(picked, 1e-12))))
    m = metrics(preds, data.labels, data.num_classes)
    return {"loss": loss, "accuracy": m.accuracy, "macro_f1": m.macro_f1, "probs": probs, "preds": preds}


def results_records(data: ClipData, probs: np.ndarray) -> list[dict]:
    return [{"clip_id": cid, "label": int(y), "pred": int(np.argmax(p)),
             "probs": [float(x) for x in p]}
            for cid, y, p in zip(data.clip_ids, data.labels, probs)]


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

@dataclass
class TrainResult:
    net: TwoStreamNet
    log: list[dict]
    best_epoch: int
    best_score: tuple


def _snapshot(net):
    return {k: v.data.copy() for k, v in net.params.items()}


def train(plan: TrainPlan, net: TwoStreamNet, train_data: ClipData, val_data: ClipData | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run every phase of ``plan``; keep the parameters with the best validation score.

    The score is (macro F1, -loss) on ``val_data`` (the training clips when no
    validation split exists). Each phase starts from the best parameters so far,
    and the returned network holds the overall best.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    val_data = val_data if val_data is not None and len(val_data) else train_data
    cfg = net.config
    weights = None
    if plan.class_weighting:
        weights = class_weights(train_data.labels, train_data.num_classes)
    w_tensor = None if weights is None else T.Tensor(weights, dtype=net.dtype)
    rng = SplitMix64(plan.seed)
    bs = plan.batch_size or len(train_data)
    use_mask = not cfg.single_stream

    best_state, best_score, best_epoch = _snapshot(net), None, 0
    log, epoch = [], 0
    for phase_no, phase in enumerate(plan.phases, start=1):
        frozen = phase.frozen(net.params)
        for name, p in net.params.items():
            p.requires_grad = name not in frozen
        opt = Optimizer(net.params, lr=phase.lr, variant=plan.optimizer)
        for _ in range(phase.epochs):
            epoch += 1
            order = list(range(len(train_data)))
            rng.shuffle(order)
            total, seen = 0.0, 0
            for start in range(0, len(order), bs):
                idx = order[start:start + bs]
                rgb, mask = train_data.batch(idx, cfg.k, rng)
                opt.zero_grad()
                loss = T.cross_entropy(net.logits(rgb, mask if use_mask else None),
                                       train_data.labels[idx], w_tensor)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}")
                loss.backward()
                clip_grad_norm([p for n, p in net.params.items() if n not in frozen], GRAD_CLIP)
                opt.step(frozen)
                total += value * len(idx)
                seen += len(idx)
            ev = evaluate(net, val_data, plan.seed, weights)
            eta = net.eta()
            rec = {"epoch": epoch, "phase": phase_no, "train_loss": total / seen,
                   "val_loss": ev["loss"], "val_acc": ev["accuracy"], "val_macro_f1": ev["macro_f1"],
                   "eta_rgb": None if eta is None else eta[0],
                   "eta_mask": None if eta is None else eta[1]}
            log.append(rec)
            if on_epoch:
                on_epoch(rec)
            score = (ev["macro_f1"], -ev["loss"])
            if best_score is None or score > best_score:
                best_state, best_score, best_epoch = _snapshot(net), score, epoch
        # the next phase resumes from the best weights found so far
        net.load_state_dict(best_state)
    for p in net.params.values():
        p.requires_grad = True
        p.grad = None
    if best_score is None:
        ev = evaluate(net, val_data, plan.seed, weights)
        best_score = (ev["macro_f1"], -ev["loss"])
    return TrainResult(net, log, best_epoch, best_score)
