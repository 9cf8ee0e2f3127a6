"""Two-stage self-supervised training.

Stage 1 learns class-agnostic moving-foreground segmentation from generated
sprite sequences (cross entropy, two learning-rate groups with the encoder
on the slower one). The trained model then harvests foreground masks and
gripper paste points, which drive the stage-2 fine-tuning on semantic
channels (encoder frozen up to the merge point, multi-label BCE).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWState, DTensor, adamw_step
from .errors import ConfigError, HarvestError, TrainingError, UsageError
from .net import (ModelState, RecurrentState, forward_pair,
                  freeze_pre_correlation, init_recurrent_state)
from .synthgen import CLASS_INDEX, PairRecord, SequenceRecord, rng_from


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage.

    lr_main defaults to 1e-3 for stage 1 and 1e-4 for stage 2 (the reduced
    fine-tuning rate); stage 2 always freezes the encoder up to the merge
    point and uses the multi-label BCE loss.
    """
    stage: int = 1
    epochs: int = 10
    batch_size: int = 2
    lr_main: Optional[float] = None
    lr_backbone: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    loss: Optional[str] = None
    freeze_pre_corr: Optional[bool] = None
    pairs_per_sequence: int = 5
    max_steps: Optional[int] = None
    # fraction of stage-1 samples that repeat one frame with an
    # all-background target: no observable motion means no foreground
    static_pair_prob: float = 0.15
    # global-norm gradient clip; tames rare loss spikes at batch size 2
    grad_clip: float = 5.0
    # recurrent-model training: truncated-BPTT window and the probability
    # that a window transition repeats a frame (teaching the memory to hold)
    bptt_len: int = 3
    static_prob: float = 0.35

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr_main is None:
            self.lr_main = 1e-3 if self.stage == 1 else 1e-4
        if self.loss is None:
            self.loss = "ce" if self.stage == 1 else "bce_multilabel"
        if self.freeze_pre_corr is None:
            self.freeze_pre_corr = self.stage == 2
        if self.stage == 2 and (self.loss != "bce_multilabel"
                                or not self.freeze_pre_corr):
            raise ConfigError("stage 2 requires loss=bce_multilabel and "
                              "freeze_pre_corr=True")
        if self.loss not in ("ce", "bce_multilabel"):
            raise ConfigError(f"unknown loss {self.loss!r}")


@dataclass
class TrainLog:
    rows: List[dict] = field(default_factory=list)

    def add(self, step, epoch, loss, lr, val_miou=None):
        self.rows.append({"step": step, "epoch": epoch, "loss": float(loss),
                          "lr": lr, "val_miou": val_miou})

    def losses(self) -> List[float]:
        return [r["loss"] for r in self.rows]

    def val_mious(self) -> List[float]:
        return [r["val_miou"] for r in self.rows if r["val_miou"] is not None]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "epoch", "loss", "lr", "val_miou"])
            for r in self.rows:
                val = "" if r["val_miou"] is None else repr(float(r["val_miou"]))
                writer.writerow([r["step"], r["epoch"], repr(r["loss"]),
                                 repr(float(r["lr"])), val])


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _to_input(imgs: List[np.ndarray], dtype) -> DTensor:
    arr = np.stack(imgs).astype(dtype) / dtype.type(255.0)
    return DTensor(arr.transpose(0, 3, 1, 2))


def split_records(records, split: str):
    return [r for r in records if r.split == split]


def _sequence_records(dataset) -> List[SequenceRecord]:
    recs = [r for r in dataset if isinstance(r, SequenceRecord)]
    if not recs:
        raise ConfigError("stage-1 training needs sequence records")
    return recs


def _pair_records(dataset) -> List[PairRecord]:
    recs = [r for r in dataset if isinstance(r, PairRecord)]
    if not recs:
        raise ConfigError("stage-2 training needs pair records")
    return recs


def stage2_targets(mask_cls: np.ndarray, class_names: Sequence[str],
                   dtype=np.float32) -> np.ndarray:
    """Per-channel binary targets [N,K,H,W] from class-index masks.

    background = no semantic class at all (distractor pixels are not
    background); foreground = grasped foreground (manipulator, object,
    gripper) excluding distractors. Gripper pixels fold into the manipulator
    channel when no gripper head exists.
    """
    man_raw = mask_cls == CLASS_INDEX["manipulator"]
    obj = mask_cls == CLASS_INDEX["object"]
    gri = mask_cls == CLASS_INDEX["gripper"]
    dis = mask_cls == CLASS_INDEX["distractor"]
    plain_fg = mask_cls == CLASS_INDEX["foreground"]
    man = man_raw if "gripper" in class_names else (man_raw | gri)
    semantic = man_raw | obj | gri | dis | plain_fg
    per_class = {
        "background": ~semantic,
        "foreground": man_raw | obj | gri | plain_fg,
        "manipulator": man,
        "object": obj,
        "gripper": gri,
        "distractor": dis,
    }
    chans = [per_class[name] for name in class_names]
    return np.stack(chans, axis=1).astype(dtype)


# ---------------------------------------------------------------------------
# shared loop pieces
# ---------------------------------------------------------------------------

def _make_optimizer(model: ModelState, cfg: TrainConfig) -> AdamWState:
    overrides = {}
    if cfg.stage == 1:
        overrides = {name: cfg.lr_backbone for name in model.params
                     if name.startswith("enc")}
    return AdamWState(lr=cfg.lr_main, weight_decay=cfg.weight_decay,
                      lr_overrides=overrides)


def _loss_for(model, logits, mask_cls, cfg: TrainConfig):
    if cfg.loss == "ce":
        labels = (mask_cls > 0).astype(np.int64)
        base = ad.narrow(logits, 1, 0, 2) if logits.shape[1] > 2 else logits
        return ad.cross_entropy_loss(base, labels)
    targets = stage2_targets(mask_cls, model.cfg.class_names,
                             dtype=model.dtype.type)
    return ad.bce_multilabel_loss(logits, targets)


def _check_finite(loss_value: float, step: int) -> None:
    if not np.isfinite(loss_value):
        raise TrainingError(f"non-finite loss at step {step}")


def _clip_gradients(model: ModelState, max_norm: float) -> None:
    if not max_norm or max_norm <= 0:
        return
    params = [p for p in model.params.values()
              if p.trainable and p.grad is not None]
    total = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = np.asarray(max_norm / norm, dtype=model.dtype)
        for p in params:
            p.grad = p.grad * scale


def _val_miou_stage1(model, val_records, max_pairs=20) -> Optional[float]:
    from .evalkit import decode_logits, iou
    if not val_records:
        return None
    inter = {c: 0 for c in ("background", "foreground")}
    union = {c: 0 for c in ("background", "foreground")}
    count = 0
    with ad.no_grad():
        for rec in val_records:
            if count >= max_pairs:
                break
            a, b = rec.load_frame(0), rec.load_frame(rec.n_frames - 1)
            gt = rec.load_mask(rec.n_frames - 1) > 0
            x = _to_input([a], model.dtype)
            y = _to_input([b], model.dtype)
            logits, _ = forward_pair(model, x, y)
            pred = decode_logits(logits.data, model.cfg)[0] > 0
            for cls, pm, gm in (("foreground", pred, gt),
                                ("background", ~pred, ~gt)):
                inter[cls] += int((pm & gm).sum())
                union[cls] += int((pm | gm).sum())
            count += 1
    ious = [(inter[c] / union[c]) if union[c] else 1.0 for c in inter]
    return float(np.mean(ious))


def _val_miou_stage2(model, val_records, max_pairs=20) -> Optional[float]:
    from .evalkit import evaluate
    if not val_records:
        return None
    classes = ("background", "foreground") + model.cfg.extra_classes
    report = evaluate(model, val_records[:max_pairs], classes)
    return report.miou


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def train_stage1(dataset, cfg: TrainConfig, model: ModelState
                 ) -> Tuple[ModelState, TrainLog]:
    """Train moving-foreground segmentation on sequence records.

    Pairs are two distinct frames of one sequence; the second frame's mask
    is the target. Encoder parameters train at lr_backbone, everything else
    at lr_main. Recurrent models train on truncated windows of consecutive
    transitions, with occasional repeated-frame steps so the memory learns
    to hold predictions through static input.
    """
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 TrainConfig")
    records = _sequence_records(dataset)
    train = split_records(records, "train") or records
    val = split_records(records, "val")
    opt = _make_optimizer(model, cfg)
    log = TrainLog()
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        rng = rng_from(cfg.seed, 50, epoch)
        if model.cfg.recurrent:
            batches = _recurrent_batches(train, cfg, rng)
        else:
            batches = _pair_batches(train, cfg, rng)
        last_of_epoch = len(batches) - 1
        for bi, batch in enumerate(batches):
            if model.cfg.recurrent:
                loss_val = _recurrent_step(model, batch, cfg, opt)
            else:
                loss_val = _pair_step(model, batch, cfg, opt)
            step += 1
            _check_finite(loss_val, step)
            val_miou = None
            if bi == last_of_epoch:
                val_miou = _val_miou_stage1(model, val)
            log.add(step, epoch, loss_val, cfg.lr_main, val_miou)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
    return model, log


def _pair_batches(train, cfg, rng):
    pairs = []
    for rec in train:
        n = rec.n_frames
        for _ in range(cfg.pairs_per_sequence):
            i = int(rng.integers(0, n))
            if rng.random() < cfg.static_pair_prob:
                # repeated frame: nothing moves, the target is empty
                pairs.append((rec, i, i))
                continue
            j = int(rng.integers(0, n - 1))
            if j >= i:
                j += 1
            pairs.append((rec, i, j))
    order = rng.permutation(len(pairs))
    pairs = [pairs[k] for k in order]
    bs = cfg.batch_size
    return [pairs[k:k + bs] for k in range(0, len(pairs), bs)]


def _pair_step(model, batch, cfg, opt):
    imgs_a = [rec.load_frame(i) for rec, i, _ in batch]
    imgs_b = [rec.load_frame(j) for rec, _, j in batch]
    masks = np.stack([rec.load_mask(j) if i != j else
                      np.zeros_like(rec.load_mask(j))
                      for rec, i, j in batch])
    x = _to_input(imgs_a, model.dtype)
    y = _to_input(imgs_b, model.dtype)
    logits, _ = forward_pair(model, x, y)
    loss = _loss_for(model, logits, masks, cfg)
    model.zero_grad()
    loss.backward()
    _clip_gradients(model, cfg.grad_clip)
    adamw_step(model.params, opt)
    return loss.item()


def _recurrent_batches(train, cfg, rng):
    """Windows of cfg.bptt_len transitions over batch_size sequences with a
    shared move/hold pattern per window."""
    per_seq = max(1, cfg.pairs_per_sequence // max(cfg.bptt_len - 1, 1))
    bs = min(cfg.batch_size, len(train))
    windows = []
    for _ in range(per_seq):
        order = rng.permutation(len(train))
        for k in range(0, len(train) - bs + 1, bs):
            recs = [train[order[k + m]] for m in range(bs)]
            n = min(r.n_frames for r in recs)
            span = min(cfg.bptt_len, n - 1)
            t0 = int(rng.integers(0, n - span))
            # the first transition always moves so the memory holds
            # something before any repeated-frame step asks for it
            pattern = [False] + [bool(rng.random() < cfg.static_prob)
                                 for _ in range(span - 1)]
            windows.append((recs, t0, pattern))
    return windows


def _recurrent_step(model, window, cfg, opt):
    recs, t0, pattern = window
    state: Optional[RecurrentState] = None
    losses = []
    t = t0
    for hold in pattern:
        nxt = t if hold else t + 1
        imgs_a = [r.load_frame(t) for r in recs]
        imgs_b = [r.load_frame(nxt) for r in recs]
        masks = np.stack([r.load_mask(nxt) for r in recs])
        x = _to_input(imgs_a, model.dtype)
        y = _to_input(imgs_b, model.dtype)
        logits, state = forward_pair(model, x, y, state)
        losses.append(_loss_for(model, logits, masks, cfg))
        t = nxt
    total = ad.mul(losses[0], 1.0 / len(losses))
    for ls in losses[1:]:
        total = ad.add(total, ad.mul(ls, 1.0 / len(losses)))
    model.zero_grad()
    total.backward()
    _clip_gradients(model, cfg.grad_clip)
    adamw_step(model.params, opt)
    return total.item()


# ---------------------------------------------------------------------------
# harvesting
# ---------------------------------------------------------------------------

def harvest_foreground(model: ModelState, img_a: np.ndarray, img_b: np.ndarray,
                       min_area: int = 8) -> np.ndarray:
    """Foreground mask of img_b predicted by a stage-1 model, with connected
    components below min_area removed. Empty masks are a valid result."""
    from .evalkit import decode_logits, remove_small_components
    x = _to_input([img_a], model.dtype)
    y = _to_input([img_b], model.dtype)
    with ad.no_grad():
        logits, _ = forward_pair(model, x, y)
    fg = decode_logits(logits.data, model.cfg)[0] > 0
    return remove_small_components(fg, min_area)


def extract_paste_point(model: ModelState, frame_closed: np.ndarray,
                        frame_open: np.ndarray, min_area: int = 4
                        ) -> Tuple[float, float]:
    """Centroid of the finger-motion region between a closed-gripper and an
    open-gripper frame at a static pose.

    The harvested mask tends to complete the moving fingers backward onto
    the static palm; intersecting it with the support of actual pixel
    change isolates the finger motion before taking the centroid.
    """
    mask = harvest_foreground(model, frame_closed, frame_open, min_area=min_area)
    if not mask.any():
        raise HarvestError("no foreground harvested from the gripper pair")
    diff = np.any(frame_closed != frame_open, axis=-1)
    grown = diff.copy()
    grown[1:, :] |= diff[:-1, :]
    grown[:-1, :] |= diff[1:, :]
    grown[:, 1:] |= diff[:, :-1]
    grown[:, :-1] |= diff[:, 1:]
    refined = mask & grown
    if not refined.any():
        raise HarvestError("harvested mask does not touch the changed pixels")
    ys, xs = np.nonzero(refined)
    return float(xs.mean()), float(ys.mean())


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def finetune_stage2(dataset, cfg: TrainConfig, model: ModelState
                    ) -> Tuple[ModelState, TrainLog]:
    """Fine-tune semantic heads on stage-2 pairs: encoder frozen up to the
    merge point, one learning-rate group, multi-label BCE on all channels."""
    if cfg.stage != 2:
        raise ConfigError("finetune_stage2 needs a stage-2 TrainConfig")
    if not model.cfg.extra_classes:
        raise UsageError("model has no extra heads; call extend_heads first")
    records = _pair_records(dataset)
    train = split_records(records, "train") or records
    val = split_records(records, "val")
    freeze_pre_correlation(model)
    opt = _make_optimizer(model, cfg)
    log = TrainLog()
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        rng = rng_from(cfg.seed, 60, epoch)
        order = rng.permutation(len(train))
        bs = cfg.batch_size
        batches = [order[k:k + bs] for k in range(0, len(order), bs)]
        for bi, idx in enumerate(batches):
            pairs = [train[int(i)].load() for i in idx]
            x = _to_input([p.img_a for p in pairs], model.dtype)
            y = _to_input([p.img_b for p in pairs], model.dtype)
            masks = np.stack([p.mask_b for p in pairs])
            logits, _ = forward_pair(model, x, y)
            loss = _loss_for(model, logits, masks, cfg)
            model.zero_grad()
            loss.backward()
            _clip_gradients(model, cfg.grad_clip)
            adamw_step(model.params, opt)
            step += 1
            _check_finite(loss.item(), step)
            val_miou = None
            if bi == len(batches) - 1:
                val_miou = _val_miou_stage2(model, val)
            log.add(step, epoch, loss.item(), cfg.lr_main, val_miou)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
    return model, log
