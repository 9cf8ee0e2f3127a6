"""Procedural training data: moving sprites, robot-arm composites, datasets.

Everything is rendered from scratch in numpy (layered-gradient backgrounds,
textured blob/polygon/ellipse sprites, an articulated two-segment arm with a
two-finger gripper) so datasets are deterministic functions of a seed and
need no external assets. Masks are tracked exactly through nearest-neighbor
sprite rotation, which keeps them binary and pixel-consistent with the
rendered frames.

Class indices used in mask PNGs:
    0 background, 1 foreground, 2 manipulator, 3 object, 4 gripper,
    5 distractor
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError

CLASS_INDEX = {
    "background": 0,
    "foreground": 1,
    "manipulator": 2,
    "object": 3,
    "gripper": 4,
    "distractor": 5,
}
INDEX_CLASS = {v: k for k, v in CLASS_INDEX.items()}

SPRITE_KINDS = ("ellipse", "blob", "polygon", "bar")

# semantic classes that count as grasped foreground (distractor does not)
FOREGROUND_CLASSES = ("foreground", "manipulator", "object", "gripper")


@dataclass(frozen=True)
class GenConfig:
    """Generator knobs; defaults give the 64x96 desk scale.

    bg_clutter pastes static sprites of the same size family as the moving
    foreground into every background, so nothing about a shape's appearance
    predicts motion; disable it only for pure fitting-capacity experiments.
    """
    height: int = 64
    width: int = 96
    frames_per_seq: int = 10
    max_shift: Optional[int] = None          # default height // 8
    max_rotation_deg: float = 15.0
    sprite_frac: Tuple[float, float] = (0.22, 0.42)   # of image height
    min_sprite_area: int = 16
    occluder: bool = True
    distractors: bool = False
    augment: bool = True
    bg_clutter: bool = True
    # moving-sprite shape families; bars teach thin elongated structures
    sprite_kinds: Tuple[str, ...] = ("ellipse", "blob", "polygon", "bar")
    noise_sigma_range: Tuple[float, float] = (0.0, 12.0)
    gain_range: Tuple[float, float] = (0.8, 1.2)
    brightness_range: Tuple[float, float] = (-20.0, 20.0)

    def shift_limit(self) -> int:
        return self.height // 8 if self.max_shift is None else self.max_shift


def rng_from(seed: int, *branch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        (int(seed),) + tuple(int(b) for b in branch))))


def split_for_id(i: int) -> str:
    """Exact 90/10 bucket rule: ids ending in 9 are validation."""
    return "val" if i % 10 == 9 else "train"


# ---------------------------------------------------------------------------
# scene containers
# ---------------------------------------------------------------------------

@dataclass
class SceneSequence:
    frames: List[np.ndarray]          # uint8 [H,W,3]
    masks: List[np.ndarray]           # uint8 [H,W] class indices
    meta: dict = field(default_factory=dict)


@dataclass
class ScenePair:
    img_a: np.ndarray
    img_b: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray
    meta: dict = field(default_factory=dict)

    def class_mask(self, name: str, frame: str = "b") -> np.ndarray:
        cls = CLASS_INDEX[name]
        mask = self.mask_b if frame == "b" else self.mask_a
        if name == "foreground":
            return np.isin(mask, (CLASS_INDEX["foreground"],
                                  CLASS_INDEX["manipulator"],
                                  CLASS_INDEX["object"],
                                  CLASS_INDEX["gripper"]))
        return mask == cls


# ---------------------------------------------------------------------------
# low-level raster helpers
# ---------------------------------------------------------------------------

def _value_noise(rng, h, w, cells=(4, 6), amplitude=1.0):
    gh, gw = cells
    grid = rng.uniform(-amplitude, amplitude, size=(gh, gw))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def make_background(rng: np.random.Generator, h: int, w: int,
                    clutter_frac: Optional[Tuple[float, float]] = None,
                    clutter_kinds: Tuple[str, ...] = SPRITE_KINDS
                    ) -> np.ndarray:
    """Layered gradients + value-noise texture + static clutter.

    When clutter_frac is given, textured sprites of that size family are
    pasted as static scene content; they are indistinguishable from a
    moving foreground sprite except that they do not move, so a model must
    compare the two frames to find what moved.
    """
    c0 = rng.uniform(40, 215, size=3)
    c1 = rng.uniform(40, 215, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    t = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    img = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]
    for ch in range(3):
        img[..., ch] += _value_noise(rng, h, w, cells=(5, 7), amplitude=14.0)
    n_patches = rng.integers(1, 4)
    for _ in range(n_patches):
        ph = int(rng.integers(h // 8, h // 3))
        pw = int(rng.integers(w // 8, w // 3))
        py = int(rng.integers(0, h - ph))
        px = int(rng.integers(0, w - pw))
        shade = rng.uniform(-30, 30, size=3)
        img[py:py + ph, px:px + pw] += shade[None, None, :]
    img = np.clip(img, 0, 255).astype(np.uint8)
    if clutter_frac is not None:
        scratch = np.zeros((h, w), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            mask, tex = make_sprite(rng, h, frac_range=clutter_frac,
                                    kinds=clutter_kinds)
            cy = int(rng.integers(mask.shape[0] // 3, h - mask.shape[0] // 3))
            cx = int(rng.integers(mask.shape[1] // 3, w - mask.shape[1] // 3))
            paste(img, scratch, mask, tex, cy - mask.shape[0] // 2,
                  cx - mask.shape[1] // 2, 1)
    return img


def _texture(rng, h, w, base=None, avoid=None):
    if base is None:
        base = rng.uniform(50, 205, size=3)
        if avoid is not None:
            # resample until the base color clearly separates from `avoid`
            for _ in range(16):
                if np.linalg.norm(base - avoid) >= 90.0:
                    break
                base = rng.uniform(30, 225, size=3)
    else:
        base = np.asarray(base, float)
    tex = np.tile(base[None, None, :], (h, w, 1))
    for ch in range(3):
        tex[..., ch] += _value_noise(rng, h, w, cells=(3, 3), amplitude=18.0)
    if rng.random() < 0.5:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.5)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        stripes = np.sin((np.cos(theta) * xx + np.sin(theta) * yy) * freq)
        tex += (stripes[..., None] * rng.uniform(8, 25))
    return np.clip(tex, 0, 255).astype(np.uint8)


def make_sprite(rng: np.random.Generator, h_img: int,
                frac_range=(0.22, 0.42),
                avoid_color=None,
                kinds: Tuple[str, ...] = SPRITE_KINDS
                ) -> Tuple[np.ndarray, np.ndarray]:
    """Random textured sprite (ellipse / blob / star polygon / thin bar);
    returns (mask, texture)."""
    r = rng.uniform(*frac_range) * h_img / 2.0
    size = int(np.ceil(2 * r)) + 3
    cy = cx = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = yy - cy, xx - cx
    kind = SPRITE_KINDS.index(kinds[int(rng.integers(0, len(kinds)))])
    if kind == 3:  # thin bar
        th = rng.uniform(0, np.pi)
        half_w = rng.uniform(1.5, 3.0)
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        mask = (np.abs(u) <= r * 0.95) & (np.abs(v) <= half_w)
        return mask, _texture(rng, size, size, avoid=avoid_color)
    if kind == 0:  # ellipse
        ry = r * rng.uniform(0.55, 1.0)
        rx = r * rng.uniform(0.55, 1.0)
        th = rng.uniform(0, np.pi)
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    elif kind == 1:  # smooth blob
        phi = np.arctan2(dy, dx)
        rad = np.full_like(phi, r * 0.85)
        for k in range(1, 5):
            rad += r * rng.uniform(0, 0.28 / k) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
        mask = np.hypot(dy, dx) <= rad
    else:  # star-shaped polygon
        nv = int(rng.integers(5, 9))
        angs = np.sort(rng.uniform(0, 2 * np.pi, size=nv))
        radii = r * rng.uniform(0.55, 1.25, size=nv)
        phi = np.mod(np.arctan2(dy, dx), 2 * np.pi)
        idx = np.searchsorted(angs, phi) % nv
        a0 = angs[idx - 1]
        a1 = angs[idx]
        span = np.mod(a1 - a0, 2 * np.pi)
        span = np.where(span == 0, 2 * np.pi, span)
        f = np.mod(phi - a0, 2 * np.pi) / span
        bound = radii[idx - 1] * (1 - f) + radii[idx] * f
        mask = np.hypot(dy, dx) <= bound
    return mask, _texture(rng, size, size, avoid=avoid_color)


def rotate_sprite(mask: np.ndarray, tex: np.ndarray, deg: float
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor rotation about the sprite center, exact mask tracking.

    deg == 0 returns the inputs unchanged so pure translations stay
    bit-exact.
    """
    if deg == 0.0:
        return mask, tex
    h, w = mask.shape
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    corners = np.array([[-cy, -cx], [-cy, cx], [cy, -cx], [cy, cx]])
    rot = np.abs(corners @ np.array([[c, s], [-s, c]]).T)
    h2 = int(np.ceil(2 * rot[:, 0].max())) + 1
    w2 = int(np.ceil(2 * rot[:, 1].max())) + 1
    cy2, cx2 = (h2 - 1) / 2.0, (w2 - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h2), np.arange(w2), indexing="ij")
    dy, dx = yy - cy2, xx - cx2
    # inverse rotation back into source coordinates
    sy = np.rint(cy + (-s * dx + c * dy)).astype(int)
    sx = np.rint(cx + (c * dx + s * dy)).astype(int)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out_mask = np.zeros((h2, w2), dtype=bool)
    out_tex = np.zeros((h2, w2, 3), dtype=np.uint8)
    sy_c = np.clip(sy, 0, h - 1)
    sx_c = np.clip(sx, 0, w - 1)
    out_mask[valid] = mask[sy_c, sx_c][valid]
    out_tex[out_mask] = tex[sy_c, sx_c][out_mask]
    return out_mask, out_tex


def paste(img: np.ndarray, cls: np.ndarray, mask: np.ndarray, tex: np.ndarray,
          top: int, left: int, cls_idx: int, under: bool = False) -> None:
    """Blit a sprite onto image+class canvas at integer (top, left)."""
    h, w = img.shape[:2]
    sh, sw = mask.shape
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + sh, h), min(left + sw, w)
    if y0 >= y1 or x0 >= x1:
        return
    sub = mask[y0 - top:y1 - top, x0 - left:x1 - left]
    if under:
        sub = sub & (cls[y0:y1, x0:x1] == 0)
    img[y0:y1, x0:x1][sub] = tex[y0 - top:y1 - top, x0 - left:x1 - left][sub]
    cls[y0:y1, x0:x1][sub] = cls_idx


# ---------------------------------------------------------------------------
# stage 1: one moving sprite over a static scene
# ---------------------------------------------------------------------------

def gen_stage1_sequence(seed: int, cfg: GenConfig) -> SceneSequence:
    """Render frames_per_seq frames of one sprite random-walking over a
    static background; per-frame exact silhouette masks; deterministic."""
    if cfg.height < 16 or cfg.width < 16:
        raise ConfigError(f"image {cfg.height}x{cfg.width} too small")
    rng = rng_from(seed, 1)
    clutter = cfg.sprite_frac if cfg.bg_clutter else None
    bg = make_background(rng, cfg.height, cfg.width, clutter_frac=clutter,
                         clutter_kinds=cfg.sprite_kinds)
    bg_mean = bg.reshape(-1, 3).mean(axis=0)
    for attempt in range(32):
        mask, tex = make_sprite(rng_from(seed, 2, attempt), cfg.height,
                                cfg.sprite_frac, avoid_color=bg_mean,
                                kinds=cfg.sprite_kinds)
        if mask.sum() >= cfg.min_sprite_area:
            break
    sprite_id = int(rng_from(seed, 3).integers(0, 2 ** 31))

    # keep the sprite fully inside the frame for every rotation: bound by
    # the farthest mask pixel from the sprite center
    ys, xs = np.nonzero(mask)
    cy0, cx0 = (mask.shape[0] - 1) / 2.0, (mask.shape[1] - 1) / 2.0
    rad = int(np.ceil(np.hypot(ys - cy0, xs - cx0).max())) + 2
    lo_y, hi_y = rad, cfg.height - rad
    lo_x, hi_x = rad, cfg.width - rad
    if lo_y >= hi_y or lo_x >= hi_x:
        raise ConfigError("sprite too large for the frame; reduce sprite_frac")

    s = cfg.shift_limit()
    cy = int(rng.integers(lo_y, hi_y))
    cx = int(rng.integers(lo_x, hi_x))
    angle = 0.0
    frames, masks = [], []
    displacements, rotations = [], []
    for k in range(cfg.frames_per_seq):
        if k > 0:
            dy = int(rng.integers(-s, s + 1))
            dx = int(rng.integers(-s, s + 1))
            da = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
            # reflect at the walls so the sprite never clips
            ny, nx = cy + dy, cx + dx
            if ny < lo_y or ny >= hi_y:
                dy = -dy
            if nx < lo_x or nx >= hi_x:
                dx = -dx
            cy += dy
            cx += dx
            angle += da
            displacements.append((dx, dy))
            rotations.append(da)
        rm, rt = rotate_sprite(mask, tex, angle)
        frame = bg.copy()
        cls = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
        top = cy - rm.shape[0] // 2
        left = cx - rm.shape[1] // 2
        paste(frame, cls, rm, rt, top, left, CLASS_INDEX["foreground"])
        frames.append(frame)
        masks.append(cls)
    meta = {"seed": int(seed), "stage": 1, "sprite_id": sprite_id,
            "displacement_px": displacements, "rotation_deg": rotations}
    return SceneSequence(frames=frames, masks=masks, meta=meta)


# ---------------------------------------------------------------------------
# stage 2: articulated arm + grasped occluder
# ---------------------------------------------------------------------------

@dataclass
class RobotSprite:
    """Geometry of a procedural 2-D arm; lengths/widths in pixels."""
    base_x: float
    seg1_len: float
    seg2_len: float
    seg1_w: float
    seg2_w: float
    palm_len: float
    finger_len: float
    finger_w: float
    gap_closed: float
    gap_open: float
    color_seed: int


def make_arm(rng: np.random.Generator, cfg: GenConfig) -> RobotSprite:
    h = cfg.height
    return RobotSprite(
        base_x=float(rng.uniform(0.25, 0.75) * cfg.width),
        seg1_len=float(rng.uniform(0.40, 0.52) * h),
        seg2_len=float(rng.uniform(0.30, 0.42) * h),
        seg1_w=float(rng.uniform(0.11, 0.15) * h),
        seg2_w=float(rng.uniform(0.09, 0.12) * h),
        palm_len=3.0,
        finger_len=6.0,
        finger_w=4.0,
        gap_closed=2.0,
        gap_open=12.0,
        color_seed=int(rng.integers(0, 2 ** 31)),
    )


@dataclass
class ArmPose:
    alpha1: float      # radians, measured from +x, y grows downward
    alpha2: float
    gap: float


def sample_pose(rng: np.random.Generator, arm: RobotSprite) -> ArmPose:
    return ArmPose(
        alpha1=float(np.deg2rad(rng.uniform(55, 125))),
        alpha2=float(np.deg2rad(rng.uniform(30, 150))),
        gap=float(rng.uniform(arm.gap_closed, arm.gap_open)),
    )


def _fill_quad(canvas: np.ndarray, pts: np.ndarray) -> None:
    """Fill a convex quad given as 4x2 (x, y) float points."""
    area = 0.0
    for i in range(4):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % 4]
        area += x0 * y1 - x1 * y0
    if area < 0:
        pts = pts[::-1]
    h, w = canvas.shape
    x_lo = max(int(np.floor(pts[:, 0].min())), 0)
    x_hi = min(int(np.ceil(pts[:, 0].max())) + 1, w)
    y_lo = max(int(np.floor(pts[:, 1].min())), 0)
    y_hi = min(int(np.ceil(pts[:, 1].max())) + 1, h)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    yy, xx = np.meshgrid(np.arange(y_lo, y_hi), np.arange(x_lo, x_hi),
                         indexing="ij")
    inside = np.ones(yy.shape, dtype=bool)
    for i in range(4):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % 4]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    canvas[y_lo:y_hi, x_lo:x_hi] |= inside


def _thick_segment(canvas, p0, p1, width):
    d = np.asarray(p1, float) - np.asarray(p0, float)
    n = np.array([-d[1], d[0]])
    n = n / max(np.hypot(*n), 1e-9) * (width / 2.0)
    quad = np.array([p0 + n, p1 + n, p1 - n, p0 - n])
    _fill_quad(canvas, quad)


def render_arm(arm: RobotSprite, pose: ArmPose, h: int, w: int):
    """Rasterize arm + gripper; returns (arm_mask, gripper_mask, anchor).

    The anchor is the point midway between the two finger tips.
    """
    def step(p, alpha, length):
        return p + length * np.array([np.cos(alpha), -np.sin(alpha)])

    p0 = np.array([arm.base_x, h + 2.0])
    p1 = step(p0, pose.alpha1, arm.seg1_len)
    p2 = step(p1, pose.alpha2, arm.seg2_len)
    direction = np.array([np.cos(pose.alpha2), -np.sin(pose.alpha2)])
    lateral = np.array([-direction[1], direction[0]])

    arm_mask = np.zeros((h, w), dtype=bool)
    _thick_segment(arm_mask, p0, p1, arm.seg1_w)
    _thick_segment(arm_mask, p1, p2, arm.seg2_w)
    palm_end = p2 + direction * arm.palm_len
    # palm width uses the max gap so opening the fingers moves only them
    _thick_segment(arm_mask, p2, palm_end,
                   arm.gap_open + 2 * arm.finger_w + 2.0)

    grip_mask = np.zeros((h, w), dtype=bool)
    for side in (-1.0, 1.0):
        off = lateral * side * (pose.gap / 2.0 + arm.finger_w / 2.0)
        f0 = palm_end + off
        f1 = f0 + direction * arm.finger_len
        _thick_segment(grip_mask, f0, f1, arm.finger_w)
    grip_mask &= ~arm_mask
    # grasp point between the fingers: finger motion is symmetric about it
    anchor = palm_end + direction * (arm.finger_len * 0.5)
    return arm_mask, grip_mask, (float(anchor[0]), float(anchor[1]))


def _arm_texture(arm: RobotSprite, h: int, w: int) -> np.ndarray:
    rng = rng_from(arm.color_seed, 7)
    return _texture(rng, h, w, base=rng.uniform(70, 180, size=3))


def _compose_arm_frame(bg, arm, pose, occ_mask, occ_tex, occ_center, cfg):
    """Background + arm + gripper + optional grasped occluder."""
    img = bg.copy()
    cls = np.zeros(bg.shape[:2], dtype=np.uint8)
    tex = _arm_texture(arm, *bg.shape[:2])
    arm_mask, grip_mask, anchor = render_arm(arm, pose, *bg.shape[:2])
    img[arm_mask] = tex[arm_mask]
    cls[arm_mask] = CLASS_INDEX["manipulator"]
    gtex = np.clip(tex.astype(int) + 35, 0, 255).astype(np.uint8)
    img[grip_mask] = gtex[grip_mask]
    cls[grip_mask] = CLASS_INDEX["gripper"]
    if occ_mask is not None:
        # center the sprite by its silhouette centroid so the object mask
        # lands on the requested point
        ys, xs = np.nonzero(occ_mask)
        top = int(round(occ_center[1] - ys.mean()))
        left = int(round(occ_center[0] - xs.mean()))
        paste(img, cls, occ_mask, occ_tex, top, left, CLASS_INDEX["object"])
    return img, cls, anchor


def _anchor_inside(anchor, cfg, margin=6) -> bool:
    x, y = anchor
    return (margin <= x < cfg.width - margin) and (margin <= y < cfg.height - margin)


Point = Tuple[float, float]


def gen_stage2_pair(seed: int, cfg: GenConfig,
                    harvested_paste_point: Union[None, Point,
                                                 Tuple[Point, Point]] = None,
                    augment: Optional[bool] = None,
                    paste_point_fn=None) -> ScenePair:
    """One training pair: duplicated background, two arm poses of the same
    arm, a grasped occluder at the gripper anchor (or at the harvested paste
    point(s)), exact masks, pasted distractor optional via add_distractor.

    harvested_paste_point may be a single (x, y) used in both frames or a
    pair of points, one per frame. Alternatively paste_point_fn(closed,
    open_) -> (x, y) is called on a gripper open/close calibration pair per
    frame pose (the self-supervised harvesting protocol); if it raises
    HarvestError the true anchor is the fallback.
    """
    rng = rng_from(seed, 10)
    clutter = cfg.sprite_frac if cfg.bg_clutter else None
    bg = make_background(rng, cfg.height, cfg.width, clutter_frac=clutter,
                         clutter_kinds=cfg.sprite_kinds)
    arm = make_arm(rng_from(seed, 11), cfg)

    pose_a = pose_b = None
    anchor_a = anchor_b = None
    for attempt in range(64):
        pose_rng = rng_from(seed, 12, attempt)
        pose_a = sample_pose(pose_rng, arm)
        delta = np.deg2rad(pose_rng.uniform(6, 18)) * (1 if pose_rng.random() < 0.5 else -1)
        pose_b = ArmPose(alpha1=pose_a.alpha1 + delta * 0.5,
                         alpha2=pose_a.alpha2 + delta,
                         gap=float(pose_rng.uniform(arm.gap_closed, arm.gap_open)))
        _, _, anchor_a = render_arm(arm, pose_a, cfg.height, cfg.width)
        _, _, anchor_b = render_arm(arm, pose_b, cfg.height, cfg.width)
        if _anchor_inside(anchor_a, cfg) and _anchor_inside(anchor_b, cfg):
            break
    else:
        raise ConfigError(f"could not place arm inside a {cfg.height}x{cfg.width} frame")

    if harvested_paste_point is not None:
        first = harvested_paste_point[0]
        if isinstance(first, (tuple, list, np.ndarray)):
            point_a, point_b = harvested_paste_point
        else:
            point_a = point_b = harvested_paste_point
    elif paste_point_fn is not None:
        from .errors import HarvestError
        points = []
        for pose, anchor in ((pose_a, anchor_a), (pose_b, anchor_b)):
            closed = ArmPose(pose.alpha1, pose.alpha2, arm.gap_closed)
            opened = ArmPose(pose.alpha1, pose.alpha2, arm.gap_open)
            fc, _, _ = _compose_arm_frame(bg, arm, closed, None, None, None, cfg)
            fo, _, _ = _compose_arm_frame(bg, arm, opened, None, None, None, cfg)
            try:
                points.append(tuple(paste_point_fn(fc, fo)))
            except HarvestError:
                points.append(anchor)
        point_a, point_b = points
    else:
        point_a, point_b = anchor_a, anchor_b

    occ_mask_a = occ_tex_a = occ_mask_b = occ_tex_b = None
    if cfg.occluder:
        for attempt in range(32):
            om, ot = make_sprite(rng_from(seed, 13, attempt), cfg.height,
                                 (0.18, 0.34),
                                 kinds=("ellipse", "blob", "polygon"))
            if om.sum() >= cfg.min_sprite_area:
                break
        rot = float(rng_from(seed, 14).uniform(-35, 35))
        occ_mask_a, occ_tex_a = om, ot
        occ_mask_b, occ_tex_b = rotate_sprite(om, ot, rot)

    img_a, cls_a, _ = _compose_arm_frame(bg, arm, pose_a, occ_mask_a, occ_tex_a,
                                         point_a, cfg)
    img_b, cls_b, _ = _compose_arm_frame(bg, arm, pose_b, occ_mask_b, occ_tex_b,
                                         point_b, cfg)

    do_augment = cfg.augment if augment is None else augment
    if do_augment:
        img_a = augment_photometric(img_a, int(rng_from(seed, 15).integers(2 ** 31)),
                                    cfg, object_mask=cls_a == CLASS_INDEX["object"])
        img_b = augment_photometric(img_b, int(rng_from(seed, 16).integers(2 ** 31)),
                                    cfg, object_mask=cls_b == CLASS_INDEX["object"])

    meta = {"seed": int(seed), "stage": 2, "sprite_id": arm.color_seed,
            "displacement_px": (float(point_b[0] - point_a[0]),
                                float(point_b[1] - point_a[1])),
            "rotation_deg": 0.0,
            "anchor_a": anchor_a, "anchor_b": anchor_b,
            "augmented": bool(do_augment)}
    return ScenePair(img_a=img_a, img_b=img_b, mask_a=cls_a, mask_b=cls_b,
                     meta=meta)


def gen_gripper_calibration_pair(seed: int, cfg: GenConfig
                                 ) -> Tuple[np.ndarray, np.ndarray, Point]:
    """Two frames differing only in finger gap (closed vs open), plus the
    true anchor. This is the probe protocol for paste-point extraction."""
    rng = rng_from(seed, 20)
    clutter = cfg.sprite_frac if cfg.bg_clutter else None
    bg = make_background(rng, cfg.height, cfg.width, clutter_frac=clutter,
                         clutter_kinds=cfg.sprite_kinds)
    arm = make_arm(rng_from(seed, 21), cfg)
    for attempt in range(64):
        pose_rng = rng_from(seed, 22, attempt)
        base = sample_pose(pose_rng, arm)
        closed = ArmPose(base.alpha1, base.alpha2, arm.gap_closed)
        opened = ArmPose(base.alpha1, base.alpha2, arm.gap_open)
        _, _, anchor = render_arm(arm, closed, cfg.height, cfg.width)
        if _anchor_inside(anchor, cfg):
            break
    else:
        raise ConfigError("could not place calibration arm inside the frame")
    frame_closed, _, _ = _compose_arm_frame(bg, arm, closed, None, None, None, cfg)
    frame_open, _, anchor = _compose_arm_frame(bg, arm, opened, None, None, None, cfg)
    return frame_closed, frame_open, anchor


# ---------------------------------------------------------------------------
# photometric augmentation
# ---------------------------------------------------------------------------

def median_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 median filter with edge replication, channel-wise."""
    arr = img if img.ndim == 3 else img[..., None]
    padded = np.pad(arr, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w, c = arr.shape
    windows = np.empty((9, h, w, c), dtype=arr.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            windows[k] = padded[dy:dy + h, dx:dx + w]
            k += 1
    out = np.median(windows, axis=0).astype(img.dtype)
    return out if img.ndim == 3 else out[..., 0]


def augment_photometric(img: np.ndarray, seed: int, cfg: GenConfig,
                        object_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Gaussian noise, global color jitter, occluder-only jitter, then a
    full-image 3x3 median blur; output clamped to [0, 255] uint8."""
    rng = rng_from(seed, 30)
    out = img.astype(np.float64)
    sigma = float(rng.uniform(*cfg.noise_sigma_range))
    if sigma > 0:
        out += rng.normal(0.0, sigma, size=out.shape)
    gains = rng.uniform(*cfg.gain_range, size=3)
    offset = rng.uniform(*cfg.brightness_range)
    out = out * gains[None, None, :] + offset
    if object_mask is not None and object_mask.any():
        ogains = rng.uniform(*cfg.gain_range, size=3)
        ooff = rng.uniform(*cfg.brightness_range)
        out[object_mask] = out[object_mask] * ogains[None, :] + ooff
    out = np.clip(out, 0, 255).astype(np.uint8)
    return median_blur3(out)


# ---------------------------------------------------------------------------
# distractors
# ---------------------------------------------------------------------------

def add_distractor(pair: ScenePair, seed: int) -> ScenePair:
    """Paste one extra sprite at independent positions in both frames.

    With probability 0.5 it is drawn on top (occluding arm/object, whose
    masks shrink accordingly), otherwise beneath everything already drawn.
    """
    rng = rng_from(seed, 40)
    h, w = pair.mask_a.shape
    for attempt in range(32):
        mask, tex = make_sprite(rng_from(seed, 41, attempt), h, (0.16, 0.30))
        if mask.sum() >= 16:
            break
    on_top = bool(rng.random() < 0.5)
    out = ScenePair(img_a=pair.img_a.copy(), img_b=pair.img_b.copy(),
                    mask_a=pair.mask_a.copy(), mask_b=pair.mask_b.copy(),
                    meta=dict(pair.meta))
    for img, cls in ((out.img_a, out.mask_a), (out.img_b, out.mask_b)):
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        paste(img, cls, mask, tex, cy - mask.shape[0] // 2,
              cx - mask.shape[1] // 2, CLASS_INDEX["distractor"],
              under=not on_top)
    out.meta["distractor"] = {"on_top": on_top}
    return out


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

@dataclass
class SequenceRecord:
    id: int
    seed: int
    split: str
    frames: List[str]
    masks: List[str]
    root: Path
    stage: int = 1

    def load_frame(self, k: int) -> np.ndarray:
        return _read_png(self.root / self.frames[k])

    def load_mask(self, k: int) -> np.ndarray:
        return _read_png(self.root / self.masks[k])

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass
class PairRecord:
    id: int
    seed: int
    split: str
    img_a: str
    img_b: str
    mask_a: str
    mask_b: str
    root: Path
    stage: int = 2

    def load(self) -> ScenePair:
        return ScenePair(
            img_a=_read_png(self.root / self.img_a),
            img_b=_read_png(self.root / self.img_b),
            mask_a=_read_png(self.root / self.mask_a),
            mask_b=_read_png(self.root / self.mask_b),
            meta={"seed": self.seed, "stage": 2},
        )


def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def _read_png(path: Path) -> np.ndarray:
    if not Path(path).exists():
        raise ManifestError(f"dataset file missing: {path}")
    return np.asarray(Image.open(path))


def write_dataset(items: Sequence[Union[SceneSequence, ScenePair]],
                  out_dir) -> Path:
    """Persist sequences/pairs as PNGs plus a JSON-lines manifest.

    Ids are positional; splits follow the exact id-mod-10 rule. Returns the
    manifest path.
    """
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, item in enumerate(items):
        split = split_for_id(i)
        if isinstance(item, SceneSequence):
            frames, masks = [], []
            for k, (frame, mask) in enumerate(zip(item.frames, item.masks)):
                fp = f"images/{i:06d}_f{k:02d}.png"
                mp = f"masks/{i:06d}_f{k:02d}.png"
                _write_png(root / fp, frame)
                _write_png(root / mp, mask)
                frames.append(fp)
                masks.append(mp)
            rec = {"id": i, "stage": 1, "seed": item.meta.get("seed", 0),
                   "split": split, "frames": frames, "masks": masks}
        else:
            fa, fb = f"images/{i:06d}_a.png", f"images/{i:06d}_b.png"
            ma, mb = f"masks/{i:06d}_a.png", f"masks/{i:06d}_b.png"
            _write_png(root / fa, item.img_a)
            _write_png(root / fb, item.img_b)
            _write_png(root / ma, item.mask_a)
            _write_png(root / mb, item.mask_b)
            rec = {"id": i, "imgA": fa, "imgB": fb, "maskA": ma, "maskB": mb,
                   "seed": item.meta.get("seed", 0), "stage": 2, "split": split}
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_dataset(root) -> List[Union[SequenceRecord, PairRecord]]:
    """Parse a manifest and verify every referenced file exists."""
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise ManifestError(f"no manifest at {manifest}")
    records: List[Union[SequenceRecord, PairRecord]] = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("stage") == 1:
            paths = rec["frames"] + rec["masks"]
            out = SequenceRecord(id=rec["id"], seed=rec["seed"],
                                 split=rec["split"], frames=rec["frames"],
                                 masks=rec["masks"], root=root)
        else:
            paths = [rec["imgA"], rec["imgB"], rec["maskA"], rec["maskB"]]
            out = PairRecord(id=rec["id"], seed=rec["seed"], split=rec["split"],
                             img_a=rec["imgA"], img_b=rec["imgB"],
                             mask_a=rec["maskA"], mask_b=rec["maskB"], root=root)
        for p in paths:
            if not (root / p).exists():
                raise ManifestError(
                    f"manifest record id={rec['id']} references missing file {p}")
        records.append(out)
    return records


# ---------------------------------------------------------------------------
# bulk generation (optionally parallel over DISTINCT_THREADS workers)
# ---------------------------------------------------------------------------

def _gen_threads() -> int:
    try:
        return max(1, int(os.environ.get("DISTINCT_THREADS", "1")))
    except ValueError:
        return 1


def _stage1_job(args):
    seed, cfg = args
    return gen_stage1_sequence(seed, cfg)


def _stage2_job(args):
    seed, cfg, augment, distract = args
    pair = gen_stage2_pair(seed, cfg, augment=augment)
    if distract:
        pair = add_distractor(pair, seed)
    return pair


def build_stage1_dataset(root_seed: int, count: int, cfg: GenConfig,
                         out_dir) -> Path:
    jobs = [(int(rng_from(root_seed, 100, i).integers(2 ** 31)), cfg)
            for i in range(count)]
    items = _run_jobs(_stage1_job, jobs)
    return write_dataset(items, out_dir)


def build_stage2_dataset(root_seed: int, count: int, cfg: GenConfig,
                         out_dir, paste_point_fn=None) -> Path:
    """Generate and persist stage-2 pairs. Train-split pairs are augmented
    (when cfg.augment) and, when paste_point_fn is given, use harvested
    paste points; validation pairs stay clean with directly-pasted objects.
    paste_point_fn disables the process pool (the closure holds a model)."""
    if paste_point_fn is None:
        jobs = []
        for i in range(count):
            seed = int(rng_from(root_seed, 200, i).integers(2 ** 31))
            augment = cfg.augment and split_for_id(i) == "train"
            jobs.append((seed, cfg, augment, cfg.distractors))
        items = _run_jobs(_stage2_job, jobs)
    else:
        items = []
        for i in range(count):
            seed = int(rng_from(root_seed, 200, i).integers(2 ** 31))
            train = split_for_id(i) == "train"
            pair = gen_stage2_pair(seed, cfg, augment=cfg.augment and train,
                                   paste_point_fn=paste_point_fn if train else None)
            if cfg.distractors:
                pair = add_distractor(pair, seed)
            items.append(pair)
    return write_dataset(items, out_dir)


def _run_jobs(fn, jobs):
    threads = _gen_threads()
    if threads == 1 or len(jobs) < 4:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=8))
