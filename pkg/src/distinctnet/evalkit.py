"""Metrics, the change-detection baseline, and the experiment harnesses.

IoU aggregates intersection/union pixel counts globally over a dataset (not
per-image averages) so numbers are comparable across dataset sizes. The
motion-stop harness threads recurrent state through moving pairs and then
repeated frames; the ablation harness sweeps merge type x placement.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .errors import ConfigError, DimensionError, UsageError
from .net import (ModelState, NetConfig, build_distinctnet, count_params,
                  forward_pair)
from .synthgen import (CLASS_INDEX, PairRecord, SceneSequence, SequenceRecord,
                       rng_from)

REPORTED_CLASSES = ("background", "foreground", "manipulator", "object",
                    "gripper", "distractor")


# ---------------------------------------------------------------------------
# core metric
# ---------------------------------------------------------------------------

def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Both empty -> 1.0; exactly one empty -> 0.0.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"iou shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


# ---------------------------------------------------------------------------
# prediction decoding
# ---------------------------------------------------------------------------

def decode_logits(logits: np.ndarray, cfg: NetConfig) -> np.ndarray:
    """Logits [N,K,H,W] -> class-index maps [N,H,W].

    Base-only models argmax the two base channels. Extended models mark a
    pixel background when the background channel dominates all channels,
    otherwise assign the best semantic (extra) channel.
    """
    n, k, h, w = logits.shape
    if k != cfg.num_heads:
        raise DimensionError(f"logits have {k} channels, config expects "
                             f"{cfg.num_heads}")
    if not cfg.extra_classes:
        fg = logits[:, 1] > logits[:, 0]
        return fg.astype(np.uint8) * CLASS_INDEX["foreground"]
    out = np.zeros((n, h, w), dtype=np.uint8)
    is_bg = np.argmax(logits, axis=1) == 0
    extras = logits[:, 2:]
    best = np.argmax(extras, axis=1)
    for ei, name in enumerate(cfg.extra_classes):
        out[(best == ei) & ~is_bg] = CLASS_INDEX[name]
    return out


def class_masks_from_decoded(decoded: np.ndarray, cfg: NetConfig
                             ) -> Dict[str, np.ndarray]:
    """Binary per-class masks implied by a decoded class-index map."""
    semantic_fg = np.isin(decoded, (CLASS_INDEX["foreground"],
                                    CLASS_INDEX["manipulator"],
                                    CLASS_INDEX["object"],
                                    CLASS_INDEX["gripper"]))
    masks = {"foreground": semantic_fg, "background": decoded == 0}
    for name in ("manipulator", "object", "gripper", "distractor"):
        masks[name] = decoded == CLASS_INDEX[name]
    return masks


def gt_class_masks(mask_cls: np.ndarray, gripper_separate: bool
                   ) -> Dict[str, np.ndarray]:
    """Ground-truth binary masks from a class-index map.

    With gripper_separate False, gripper pixels count as manipulator (the
    model has no gripper head to predict them)."""
    man = mask_cls == CLASS_INDEX["manipulator"]
    gri = mask_cls == CLASS_INDEX["gripper"]
    obj = mask_cls == CLASS_INDEX["object"]
    dis = mask_cls == CLASS_INDEX["distractor"]
    plain = mask_cls == CLASS_INDEX["foreground"]
    fg = man | gri | obj | plain
    return {
        "background": ~(fg | dis),
        "foreground": fg,
        "manipulator": man if gripper_separate else (man | gri),
        "object": obj,
        "gripper": gri,
        "distractor": dis,
    }


# ---------------------------------------------------------------------------
# connected components (4-neighborhood, min-label propagation)
# ---------------------------------------------------------------------------

def label_components(mask: np.ndarray) -> np.ndarray:
    """Integer labels per 4-connected component; 0 outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.where(mask, np.arange(1, mask.size + 1).reshape(mask.shape), 0)
    while True:
        neighbor_min = labels.copy()
        shifted = np.full_like(labels, np.iinfo(labels.dtype).max)
        shifted[1:, :] = labels[:-1, :]
        neighbor_min = np.minimum(neighbor_min, np.where(shifted > 0, shifted,
                                                         neighbor_min))
        shifted = np.full_like(labels, 0)
        shifted[:-1, :] = labels[1:, :]
        neighbor_min = np.minimum(neighbor_min,
                                  np.where(shifted > 0, shifted, neighbor_min))
        shifted = np.full_like(labels, 0)
        shifted[:, 1:] = labels[:, :-1]
        neighbor_min = np.minimum(neighbor_min,
                                  np.where(shifted > 0, shifted, neighbor_min))
        shifted = np.full_like(labels, 0)
        shifted[:, :-1] = labels[:, 1:]
        neighbor_min = np.minimum(neighbor_min,
                                  np.where(shifted > 0, shifted, neighbor_min))
        neighbor_min = np.where(mask, neighbor_min, 0)
        if np.array_equal(neighbor_min, labels):
            break
        labels = neighbor_min
    return labels


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Drop 4-connected components with fewer than min_area pixels."""
    if min_area <= 1 or not mask.any():
        return np.asarray(mask, dtype=bool)
    labels = label_components(mask)
    ids, counts = np.unique(labels[labels > 0], return_counts=True)
    keep = set(ids[counts >= min_area].tolist())
    if not keep:
        return np.zeros_like(mask, dtype=bool)
    return np.isin(labels, list(keep))


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    per_class_iou: Dict[str, float]
    miou: float
    pixel_counts: Dict[str, Dict[str, int]]
    param_count: int
    latency_ms: Optional[float] = None
    decay_curve: Optional[List[Tuple[int, float, float]]] = None
    config_fingerprint: str = ""

    def to_json(self) -> str:
        payload = {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "pixel_counts": self.pixel_counts,
            "param_count": self.param_count,
            "latency_ms": self.latency_ms,
            "decay_curve": self.decay_curve,
            "config_fingerprint": self.config_fingerprint,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        d = json.loads(text)
        curve = d.get("decay_curve")
        if curve is not None:
            curve = [tuple(row) for row in curve]
        return MetricsReport(per_class_iou=d["per_class_iou"], miou=d["miou"],
                             pixel_counts=d["pixel_counts"],
                             param_count=d["param_count"],
                             latency_ms=d.get("latency_ms"),
                             decay_curve=curve,
                             config_fingerprint=d.get("config_fingerprint", ""))


def config_fingerprint(cfg: NetConfig, seeds: Sequence[int]) -> str:
    payload = json.dumps({"cfg": cfg.fingerprint_fields(),
                          "seeds": list(map(int, seeds))}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# dataset evaluation
# ---------------------------------------------------------------------------

def _eval_pairs(records) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(img_a, img_b, gt_mask_b) triples; sequences contribute their
    consecutive transitions."""
    triples = []
    for rec in sorted(records, key=lambda r: r.id):
        if isinstance(rec, SequenceRecord):
            for k in range(1, rec.n_frames):
                triples.append((rec.load_frame(k - 1), rec.load_frame(k),
                                rec.load_mask(k)))
        else:
            pair = rec.load()
            triples.append((pair.img_a, pair.img_b, pair.mask_b))
    return triples


def evaluate(model: ModelState, dataset, classes: Sequence[str],
             fingerprint: str = "", latency_ms: Optional[float] = None,
             batch_size: int = 4) -> MetricsReport:
    """Per-class IoU over a dataset with global count accumulation.

    classes are evaluated for both prediction and ground truth; a class with
    no ground-truth pixels anywhere in the dataset (other than the derived
    background/foreground pair) is treated as a configuration error.
    """
    classes = tuple(classes)
    for c in classes:
        if c not in REPORTED_CLASSES:
            raise ConfigError(f"unknown class {c!r}")
    triples = _eval_pairs(dataset)
    if not triples:
        raise ConfigError("empty evaluation dataset")
    gripper_separate = "gripper" in model.cfg.extra_classes
    seen = set()
    for _, _, gt in triples:
        seen.update(np.unique(gt).tolist())
    for c in classes:
        if c in ("background", "foreground"):
            continue
        idx = CLASS_INDEX[c]
        derivable = {idx}
        if c == "manipulator" and not gripper_separate:
            derivable.add(CLASS_INDEX["gripper"])
        if not (derivable & seen):
            raise ConfigError(f"requested class {c!r} absent from dataset")

    inter = {c: 0 for c in classes}
    union = {c: 0 for c in classes}
    pred_px = {c: 0 for c in classes}
    gt_px = {c: 0 for c in classes}
    with ad.no_grad():
        for k in range(0, len(triples), batch_size):
            chunk = triples[k:k + batch_size]
            x = np.stack([t[0] for t in chunk]).astype(model.dtype) / 255.0
            y = np.stack([t[1] for t in chunk]).astype(model.dtype) / 255.0
            logits, _ = forward_pair(model, DTensor(x.transpose(0, 3, 1, 2)),
                                     DTensor(y.transpose(0, 3, 1, 2)))
            decoded = decode_logits(logits.data, model.cfg)
            for bi, (_, _, gt_cls) in enumerate(chunk):
                pred_masks = class_masks_from_decoded(decoded[bi], model.cfg)
                gt_masks = gt_class_masks(gt_cls, gripper_separate)
                for c in classes:
                    pm, gm = pred_masks[c], gt_masks[c]
                    inter[c] += int((pm & gm).sum())
                    union[c] += int((pm | gm).sum())
                    pred_px[c] += int(pm.sum())
                    gt_px[c] += int(gm.sum())
    per_class = {c: (inter[c] / union[c]) if union[c] else 1.0 for c in classes}
    counts = {c: {"intersection": inter[c], "union": union[c],
                  "pred": pred_px[c], "gt": gt_px[c]} for c in classes}
    return MetricsReport(per_class_iou=per_class,
                         miou=float(np.mean(list(per_class.values()))),
                         pixel_counts=counts,
                         param_count=count_params(model),
                         latency_ms=latency_ms,
                         config_fingerprint=fingerprint)


def object_to_distractor_confusion(model: ModelState, dataset) -> float:
    """Fraction of ground-truth object pixels predicted as distractor."""
    triples = _eval_pairs(dataset)
    obj_total = 0
    confused = 0
    with ad.no_grad():
        for img_a, img_b, gt_cls in triples:
            x = np.stack([img_a]).astype(model.dtype) / 255.0
            y = np.stack([img_b]).astype(model.dtype) / 255.0
            logits, _ = forward_pair(model, DTensor(x.transpose(0, 3, 1, 2)),
                                     DTensor(y.transpose(0, 3, 1, 2)))
            decoded = decode_logits(logits.data, model.cfg)[0]
            gt_obj = gt_cls == CLASS_INDEX["object"]
            obj_total += int(gt_obj.sum())
            confused += int((decoded[gt_obj] == CLASS_INDEX["distractor"]).sum())
    return confused / obj_total if obj_total else 0.0


# ---------------------------------------------------------------------------
# change-detection baseline
# ---------------------------------------------------------------------------

def _gauss3(gray: np.ndarray) -> np.ndarray:
    k = np.array([np.exp(-0.5), 1.0, np.exp(-0.5)])
    k /= k.sum()
    padded = np.pad(gray, 1, mode="edge")
    rows = padded[:-2] * k[0] + padded[1:-1] * k[1] + padded[2:] * k[2]
    return rows[:, :-2] * k[0] + rows[:, 1:-1] * k[1] + rows[:, 2:] * k[2]


def change_detection_baseline(img_a: np.ndarray, img_b: np.ndarray,
                              tau: int = 15, blur: bool = True) -> np.ndarray:
    """Classical frame differencing: grayscale (ITU-R 601), optional 3x3
    Gaussian, absolute difference threshold, small components removed."""
    if img_a.shape != img_b.shape:
        raise DimensionError(f"frame shapes differ: {img_a.shape} vs {img_b.shape}")
    w = np.array([0.299, 0.587, 0.114])
    ga = img_a.astype(np.float64) @ w
    gb = img_b.astype(np.float64) @ w
    if blur:
        ga, gb = _gauss3(ga), _gauss3(gb)
    mask = np.abs(ga - gb) > tau
    return remove_small_components(mask, 8)


def baseline_foreground_iou(dataset, tau: int = 15, blur: bool = True) -> float:
    """Dataset-level foreground IoU of the change-detection baseline."""
    inter = union = 0
    for img_a, img_b, gt_cls in _eval_pairs(dataset):
        pred = change_detection_baseline(img_a, img_b, tau=tau, blur=blur)
        gt = gt_class_masks(gt_cls, gripper_separate=False)["foreground"]
        inter += int((pred & gt).sum())
        union += int((pred | gt).sum())
    return inter / union if union else 1.0


# ---------------------------------------------------------------------------
# motion-stop experiment
# ---------------------------------------------------------------------------

def _pingpong_indices(n_frames: int, n_steps: int) -> List[int]:
    """0,1,...,n-1,n-2,...: continuous frame path of arbitrary length."""
    if n_frames < 2:
        raise ConfigError("motion stop needs at least 2 frames")
    idx = [0]
    k, direction = 0, 1
    for _ in range(n_steps):
        if not 0 <= k + direction < n_frames:
            direction = -direction
        k += direction
        idx.append(k)
    return idx


def _fg_iou_at(model, img_a, img_b, gt_mask, state):
    x = np.stack([img_a]).astype(model.dtype) / 255.0
    y = np.stack([img_b]).astype(model.dtype) / 255.0
    logits, state = forward_pair(model, DTensor(x.transpose(0, 3, 1, 2)),
                                 DTensor(y.transpose(0, 3, 1, 2)), state)
    decoded = decode_logits(logits.data, model.cfg)[0]
    pred_fg = class_masks_from_decoded(decoded, model.cfg)["foreground"]
    return iou(pred_fg, gt_mask > 0), state


def motion_stop_run(model: ModelState, sequence: SceneSequence, n_move: int,
                    n_static: int, use_state: bool) -> List[float]:
    """Relative foreground IoU across one moving+static run.

    Index 0 is the last moving pair (relative IoU 1 by construction)."""
    frames, masks = sequence.frames, sequence.masks
    path = _pingpong_indices(len(frames), n_move)
    state = None
    iou_t = None
    with ad.no_grad():
        for k in range(1, len(path)):
            a, b = frames[path[k - 1]], frames[path[k]]
            iou_t, new_state = _fg_iou_at(model, a, b, masks[path[k]], state)
            if use_state:
                state = new_state
        iou0 = max(iou_t, 1e-9)
        rel = [1.0]
        last = frames[path[-1]]
        gt = masks[path[-1]]
        for _ in range(n_static):
            iou_t, new_state = _fg_iou_at(model, last, last, gt, state)
            if use_state:
                state = new_state
            rel.append(iou_t / iou0)
    return rel


def motion_stop_experiment(model: ModelState, sequences, n_move: int = 10,
                           n_static: int = 5, repeats: int = 5,
                           seed: int = 0) -> List[Tuple[int, float, float]]:
    """Decay of relative IoU after a motion stop, repeated over sequences.

    ``sequences`` is a list of SceneSequence (cycled if shorter than
    repeats) or a single sequence. Returns (t, mean, variance) rows with
    t=0 pinned at 1."""
    if not model.cfg.recurrent:
        raise UsageError("motion_stop_experiment needs a recurrent model")
    if isinstance(sequences, SceneSequence):
        sequences = [sequences]
    curves = []
    for r in range(repeats):
        seq = sequences[r % len(sequences)]
        curves.append(motion_stop_run(model, seq, n_move, n_static,
                                      use_state=True))
    arr = np.array(curves)
    return [(t, float(arr[:, t].mean()), float(arr[:, t].var()))
            for t in range(arr.shape[1])]


def motion_stop_control(model: ModelState, sequences, n_move: int = 10,
                        n_static: int = 5, repeats: int = 5
                        ) -> List[Tuple[int, float, float]]:
    """Same protocol with no state threading (non-recurrent control)."""
    if isinstance(sequences, SceneSequence):
        sequences = [sequences]
    curves = []
    for r in range(repeats):
        seq = sequences[r % len(sequences)]
        curves.append(motion_stop_run(model, seq, n_move, n_static,
                                      use_state=False))
    arr = np.array(curves)
    return [(t, float(arr[:, t].mean()), float(arr[:, t].var()))
            for t in range(arr.shape[1])]


def write_decay_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mean", "var"])
        for t, mean, var in curve:
            writer.writerow([t, repr(mean), repr(var)])


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

def measure_latency(model: ModelState, n_runs: int = 10, seed: int = 0) -> float:
    """Mean wall-clock milliseconds of a single-pair forward pass, including
    image preprocessing, after one untimed warmup pass."""
    if n_runs < 1:
        raise UsageError("n_runs must be >= 1")
    cfg = model.cfg
    rng = rng_from(seed, 90)
    frames = [(rng.random((cfg.input_h, cfg.input_w, 3)) * 255).astype(np.uint8)
              for _ in range(2)]
    def once():
        x = np.stack([frames[0]]).astype(model.dtype) / 255.0
        y = np.stack([frames[1]]).astype(model.dtype) / 255.0
        with ad.no_grad():
            forward_pair(model, DTensor(x.transpose(0, 3, 1, 2)),
                         DTensor(y.transpose(0, 3, 1, 2)))
    once()  # warmup, excluded from the mean
    t0 = time.perf_counter()
    for _ in range(n_runs):
        once()
    return (time.perf_counter() - t0) / n_runs * 1000.0


# ---------------------------------------------------------------------------
# ablation sweep
# ---------------------------------------------------------------------------

def ablation_sweep(base_cfg: NetConfig, placements: Sequence[str],
                   merge_types: Sequence[str], dataset,
                   test_dataset=None, epochs: int = 5, seed: int = 0,
                   train_overrides: Optional[dict] = None) -> List[dict]:
    """Train every (merge, placement) combination for a few epochs and
    record val/test foreground mIoU, parameter count and forward latency."""
    from .selfsup import TrainConfig, split_records, train_stage1
    rows = []
    for merge in merge_types:
        for pos in placements:
            cfg = replace(base_cfg, merge=merge, corr_after=pos)
            model = build_distinctnet(cfg, seed=seed)
            tc_kw = dict(stage=1, epochs=epochs, seed=seed)
            if train_overrides:
                tc_kw.update(train_overrides)
            model, _ = train_stage1(dataset, TrainConfig(**tc_kw), model)
            val = split_records(dataset, "val")
            classes = ("background", "foreground")
            miou_val = evaluate(model, val, classes).miou if val else float("nan")
            if test_dataset is not None:
                miou_test = evaluate(model, test_dataset, classes).miou
            else:
                miou_test = miou_val
            rows.append({
                "merge": merge,
                "pos": pos,
                "miou_val": miou_val,
                "miou_test": miou_test,
                "params": count_params(model),
                "latency_ms": measure_latency(model, n_runs=10),
            })
    return rows


def write_ablation_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["merge", "pos", "miou_val",
                                                "miou_test", "params",
                                                "latency_ms"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
