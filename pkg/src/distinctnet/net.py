"""DistinctNet: siamese residual encoder, correlation merge, ASPP, decoder.

Two input frames pass through shared encoder stages up to the configured
merge point, their features are matched (correlation volume or co-attention),
the merged stream runs through the remaining stages, ASPP and a skip-connected
decoder into per-pixel logits. An optional recurrent variant places a ConvLSTM
cell after ASPP and replaces the decoder convolutions with ConvLSTM cells so
predictions survive motion stops.

Channel layout of the logits: 0 background, 1 foreground, then one channel
per entry of cfg.extra_classes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .correspond import co_attention, global_correlation
from .errors import ConfigError, StateError, UsageError

# canonical order used when extra heads are requested by count
EXTRA_CLASS_ORDER = ("manipulator", "object", "distractor", "gripper")
BASE_CLASSES = ("background", "foreground")
PLACEMENTS = ("block1", "block2", "block3", "block4", "aspp")
SKIP_CHANNELS = 8


def _as_extra_classes(extra: Union[int, Sequence[str]]) -> Tuple[str, ...]:
    if isinstance(extra, int):
        if not 0 <= extra <= 4:
            raise ConfigError(f"extra head count must be in [0,4], got {extra}")
        return EXTRA_CLASS_ORDER[:extra]
    extra = tuple(extra)
    bad = [c for c in extra if c not in EXTRA_CLASS_ORDER]
    if bad:
        raise ConfigError(f"unknown extra classes {bad}; "
                          f"valid: {EXTRA_CLASS_ORDER}")
    if len(set(extra)) != len(extra) or len(extra) > 4:
        raise ConfigError(f"extra classes must be distinct, at most 4: {extra}")
    return extra


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; input extents must divide by 16."""
    input_h: int = 64
    input_w: int = 96
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    corr_after: str = "block2"
    aspp_rates: Tuple[int, ...] = (1, 2, 4)
    decoder_channels: int = 32
    extra_classes: Tuple[str, ...] = ()
    recurrent: bool = False
    corr_relu_before_postnorm: bool = False
    merge: str = "correlation"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "aspp_rates", tuple(self.aspp_rates))
        object.__setattr__(self, "extra_classes",
                           _as_extra_classes(self.extra_classes))
        if self.input_h % 16 or self.input_w % 16:
            raise ConfigError(
                f"input {self.input_h}x{self.input_w} must be divisible by 16 "
                f"(four stride-2 stages)")
        if len(self.stage_channels) != 4:
            raise ConfigError(f"need 4 stage widths, got {self.stage_channels}")
        if self.corr_after not in PLACEMENTS:
            raise ConfigError(f"corr_after must be one of {PLACEMENTS}, "
                              f"got {self.corr_after!r}")
        if self.merge not in ("correlation", "co_attention"):
            raise ConfigError(f"merge must be correlation|co_attention, "
                              f"got {self.merge!r}")

    # -- derived quantities -------------------------------------------------
    @property
    def num_heads(self) -> int:
        return 2 + len(self.extra_classes)

    @property
    def aspp_out(self) -> int:
        return 2 * self.decoder_channels

    @property
    def class_names(self) -> Tuple[str, ...]:
        return BASE_CLASSES + self.extra_classes

    def head_index(self, cls: str) -> int:
        return self.class_names.index(cls)

    def stage_size(self, k: int) -> Tuple[int, int]:
        """Spatial extent after stage k (k=0 is the input)."""
        return self.input_h >> k, self.input_w >> k

    def merge_stage(self) -> int:
        """Encoder stage index (1-4) the merge follows; 5 means after ASPP."""
        if self.corr_after == "aspp":
            return 5
        return int(self.corr_after[-1])

    def merge_channels(self) -> int:
        m = self.merge_stage()
        return self.aspp_out if m == 5 else self.stage_channels[m - 1]

    def merge_hw(self) -> Tuple[int, int]:
        m = self.merge_stage()
        return self.stage_size(4 if m == 5 else m)

    def fingerprint_fields(self) -> dict:
        return {
            "input_h": self.input_h, "input_w": self.input_w,
            "stage_channels": list(self.stage_channels),
            "corr_after": self.corr_after,
            "aspp_rates": list(self.aspp_rates),
            "decoder_channels": self.decoder_channels,
            "extra_classes": list(self.extra_classes),
            "recurrent": self.recurrent,
            "corr_relu_before_postnorm": self.corr_relu_before_postnorm,
            "merge": self.merge,
        }


def _num_groups(c: int) -> int:
    return min(8, c)


# ---------------------------------------------------------------------------
# parameter table
# ---------------------------------------------------------------------------

def _conv_gn_shapes(prefix: str, cout: int, cin: int, k: int) -> Dict[str, tuple]:
    return {
        f"{prefix}.w": (cout, cin, k, k),
        f"{prefix}.gn.g": (cout,),
        f"{prefix}.gn.b": (cout,),
    }


def _lstm_shapes(prefix: str, cx: int, ch: int) -> Dict[str, tuple]:
    shapes = {}
    for gate in "ifog":
        shapes[f"{prefix}.wx{gate}"] = (ch, cx, 3, 3)
        shapes[f"{prefix}.wh{gate}"] = (ch, ch, 3, 3)
        shapes[f"{prefix}.b{gate}"] = (ch,)
    return shapes


def parameter_shapes(cfg: NetConfig) -> Dict[str, tuple]:
    """Every parameter name and its shape, derived only from the config."""
    sc = cfg.stage_channels
    shapes: Dict[str, tuple] = {}
    cin = 3
    for k in range(1, 5):
        cout = sc[k - 1]
        shapes.update(_conv_gn_shapes(f"enc{k}.conv1", cout, cin, 3))
        shapes.update(_conv_gn_shapes(f"enc{k}.conv2", cout, cout, 3))
        shapes.update(_conv_gn_shapes(f"enc{k}.proj", cout, cin, 1))
        cin = cout

    cm = cfg.merge_channels()
    mh, mw = cfg.merge_hw()
    if cfg.merge == "correlation":
        merge_in = mh * mw + 2 * cm
    else:
        merge_in = 2 * cm
        shapes["merge.coatt.w"] = (cm, cm)
    shapes.update(_conv_gn_shapes("merge.reduce", cm, merge_in, 1))

    ao = cfg.aspp_out
    shapes.update(_conv_gn_shapes("aspp.b0", ao, sc[3], 1))
    for d in cfg.aspp_rates:
        shapes.update(_conv_gn_shapes(f"aspp.r{d}", ao, sc[3], 3))
    shapes.update(_conv_gn_shapes("aspp.pool", ao, sc[3], 1))
    shapes.update(_conv_gn_shapes("aspp.out", ao, (2 + len(cfg.aspp_rates)) * ao, 1))

    dc = cfg.decoder_channels
    shapes.update(_conv_gn_shapes("dec.skip", SKIP_CHANNELS, sc[0], 1))
    if cfg.recurrent:
        shapes.update(_lstm_shapes("lstm.aspp", ao, ao))
        shapes.update(_lstm_shapes("dec.lstm1", ao + SKIP_CHANNELS, dc))
        shapes.update(_lstm_shapes("dec.lstm2", dc, dc))
    else:
        shapes.update(_conv_gn_shapes("dec.conv1", dc, ao + SKIP_CHANNELS, 3))
        shapes.update(_conv_gn_shapes("dec.conv2", dc, dc, 3))

    shapes["head.w"] = (cfg.num_heads, dc, 1, 1)
    shapes["head.b"] = (cfg.num_heads,)
    return shapes


def _param_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    salt = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, salt))))


def _init_param(name: str, shape: tuple, seed: int, dtype) -> np.ndarray:
    rng = _param_rng(seed, name)
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape, dtype=dtype)
    if name == "head.b":
        # prior-odds start: background dominates every generated scene
        b = np.full(shape, -1.0, dtype=dtype)
        b[0] = 1.0
        return b
    if len(shape) == 1:
        # biases and norm offsets
        return np.zeros(shape, dtype=dtype)
    # conv / matmul weights: Kaiming-uniform over fan-in
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ModelState:
    """Named parameter set plus the config that shaped it."""
    cfg: NetConfig
    params: Dict[str, DTensor]
    dtype: np.dtype = np.dtype(np.float32)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "ModelState":
        params = {}
        for k, v in self.params.items():
            t = DTensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
            t.trainable = v.trainable
            params[k] = t
        return ModelState(cfg=self.cfg, params=params, dtype=self.dtype)

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(
                f"checkpoint does not match model: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if tuple(v.shape) != self.params[k].shape:
                raise ConfigError(
                    f"checkpoint parameter {k} has shape {v.shape}, "
                    f"model expects {self.params[k].shape}")
            self.params[k].data = v.astype(self.dtype)


def build_distinctnet(cfg: NetConfig, seed: int, dtype=np.float32) -> ModelState:
    """Deterministically initialized model; names depend only on cfg."""
    dtype = np.dtype(dtype)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        t = DTensor(_init_param(name, shape, seed, dtype), requires_grad=True,
                    name=name)
        params[name] = t
    return ModelState(cfg=cfg, params=params, dtype=dtype)


def count_params(model: ModelState) -> int:
    return int(sum(p.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# forward building blocks
# ---------------------------------------------------------------------------

def _conv_gn_relu(params, prefix, x, stride=1, pad=0, dilation=1):
    y = ad.conv2d(x, params[f"{prefix}.w"], stride=stride, pad=pad,
                  dilation=dilation)
    c = params[f"{prefix}.gn.g"].shape[0]
    y = ad.group_norm(y, _num_groups(c), params[f"{prefix}.gn.g"],
                      params[f"{prefix}.gn.b"])
    return ad.relu(y)


def _conv_gn(params, prefix, x, stride=1, pad=0, dilation=1):
    y = ad.conv2d(x, params[f"{prefix}.w"], stride=stride, pad=pad,
                  dilation=dilation)
    c = params[f"{prefix}.gn.g"].shape[0]
    return ad.group_norm(y, _num_groups(c), params[f"{prefix}.gn.g"],
                         params[f"{prefix}.gn.b"])


def _encoder_stage(params, k, x):
    main = _conv_gn_relu(params, f"enc{k}.conv1", x, stride=2, pad=1)
    main = _conv_gn(params, f"enc{k}.conv2", main, stride=1, pad=1)
    short = _conv_gn(params, f"enc{k}.proj", x, stride=2)
    return ad.relu(ad.add(main, short))


def _aspp(params, cfg, x):
    h, w = x.shape[2], x.shape[3]
    branches = [_conv_gn_relu(params, "aspp.b0", x)]
    for d in cfg.aspp_rates:
        branches.append(_conv_gn_relu(params, f"aspp.r{d}", x, pad=d, dilation=d))
    pooled = _conv_gn_relu(params, "aspp.pool", ad.global_avg_pool(x))
    branches.append(ad.bilinear_upsample(pooled, h, w))
    return _conv_gn_relu(params, "aspp.out", ad.concat(branches, axis=1))


def convlstm_step(cell_params: Dict[str, DTensor], x: DTensor,
                  h: DTensor, c: DTensor) -> Tuple[DTensor, DTensor]:
    """One ConvLSTM step with 3x3 gate convolutions, no peepholes.

    cell_params holds wx{i,f,o,g}, wh{i,f,o,g} and b{i,f,o,g}. The four
    gates are evaluated as two fused convolutions (one over x, one over h).
    """
    gates = "ifog"
    wx = ad.concat([cell_params[f"wx{g}"] for g in gates], axis=0)
    wh = ad.concat([cell_params[f"wh{g}"] for g in gates], axis=0)
    b = ad.concat([cell_params[f"b{g}"] for g in gates], axis=0)
    if h.shape != c.shape:
        raise StateError(f"hidden {h.shape} and cell {c.shape} shapes differ")
    ch = cell_params["whi"].shape[0]
    if h.shape[1] != ch:
        raise StateError(f"state has {h.shape[1]} channels, cell expects {ch}")
    pre = ad.add(ad.add(ad.conv2d(x, wx, pad=1), ad.conv2d(h, wh, pad=1)),
                 ad.reshape(b, (1, 4 * ch, 1, 1)))
    i = ad.sigmoid(ad.narrow(pre, 1, 0, ch))
    f = ad.sigmoid(ad.narrow(pre, 1, ch, ch))
    o = ad.sigmoid(ad.narrow(pre, 1, 2 * ch, ch))
    g = ad.tanh(ad.narrow(pre, 1, 3 * ch, ch))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _cell_params(params, prefix) -> Dict[str, DTensor]:
    keys = [f"wx{g}" for g in "ifog"] + [f"wh{g}" for g in "ifog"] + \
           [f"b{g}" for g in "ifog"]
    return {k: params[f"{prefix}.{k}"] for k in keys}


# ---------------------------------------------------------------------------
# recurrent state
# ---------------------------------------------------------------------------

RECURRENT_CELLS = ("lstm.aspp", "dec.lstm1", "dec.lstm2")


@dataclass
class RecurrentState:
    """Hidden/cell pairs for every ConvLSTM in the model, keyed by cell name."""
    cells: Dict[str, Tuple[DTensor, DTensor]] = field(default_factory=dict)

    def detach(self) -> "RecurrentState":
        return RecurrentState({k: (h.detach(), c.detach())
                               for k, (h, c) in self.cells.items()})


def _cell_shapes(cfg: NetConfig, n: int) -> Dict[str, tuple]:
    h16, w16 = cfg.stage_size(4)
    h2, w2 = cfg.stage_size(1)
    return {
        "lstm.aspp": (n, cfg.aspp_out, h16, w16),
        "dec.lstm1": (n, cfg.decoder_channels, h2, w2),
        "dec.lstm2": (n, cfg.decoder_channels, h2, w2),
    }


def init_recurrent_state(cfg: NetConfig, n: int, dtype=np.float32) -> RecurrentState:
    cells = {}
    for name, shape in _cell_shapes(cfg, n).items():
        cells[name] = (DTensor(np.zeros(shape, dtype=dtype)),
                       DTensor(np.zeros(shape, dtype=dtype)))
    return RecurrentState(cells)


def _check_state(cfg: NetConfig, n: int, state: RecurrentState) -> None:
    want = _cell_shapes(cfg, n)
    for name, shape in want.items():
        if name not in state.cells:
            raise StateError(f"recurrent state missing cell {name!r}")
        h, c = state.cells[name]
        if tuple(h.shape) != shape or tuple(c.shape) != shape:
            raise StateError(
                f"cell {name!r} state shape {tuple(h.shape)} does not match "
                f"model's {shape}")


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def forward_pair(model: ModelState, img_a: DTensor, img_b: DTensor,
                 state: Optional[RecurrentState] = None,
                 trace: Optional[dict] = None
                 ) -> Tuple[DTensor, Optional[RecurrentState]]:
    """Compute logits [N, 2+extras, H, W] for an image pair.

    Images are [N,3,H,W] scaled to [0,1]. For recurrent models a
    RecurrentState must thread between consecutive calls of a sequence
    (pass None to start from zeros). The returned state is graph-attached;
    detach() it at truncation boundaries during training.
    """
    cfg, params = model.cfg, model.params
    img_a, img_b = ad.ops.as_dtensor(img_a), ad.ops.as_dtensor(img_b)
    if img_a.shape != img_b.shape:
        raise StateError(f"image pair shapes differ: {img_a.shape} vs {img_b.shape}")
    n, c, h, w = img_a.shape
    if (h, w) != (cfg.input_h, cfg.input_w) or c != 3:
        raise StateError(
            f"expected [N,3,{cfg.input_h},{cfg.input_w}] images, got {img_a.shape}")
    if state is not None and not cfg.recurrent:
        raise UsageError("recurrent state passed to a non-recurrent model")
    if cfg.recurrent:
        if state is None:
            state = init_recurrent_state(cfg, n, model.dtype)
        _check_state(cfg, n, state)

    m = cfg.merge_stage()
    siamese_stages = 4 if m == 5 else m

    def encode(x, tag):
        skip = None
        for k in range(1, siamese_stages + 1):
            x = _encoder_stage(params, k, x)
            if k == 1:
                skip = x
            if trace is not None:
                trace[f"enc{k}.{tag}"] = x.data
        if m == 5:
            x = _aspp(params, cfg, x)
        return x, skip

    feat_a, _ = encode(img_a, "a")
    feat_b, skip_b = encode(img_b, "b")

    if cfg.merge == "correlation":
        vol = global_correlation(feat_a, feat_b,
                                 relu_before_postnorm=cfg.corr_relu_before_postnorm)
        merged = ad.concat([vol, feat_a, feat_b], axis=1)
    else:
        za = co_attention(feat_a, feat_b, params["merge.coatt.w"])
        merged = ad.concat([za, feat_a], axis=1)
    x = _conv_gn_relu(params, "merge.reduce", merged)

    for k in range(siamese_stages + 1, 5):
        x = _encoder_stage(params, k, x)
    if m != 5:
        x = _aspp(params, cfg, x)

    new_state: Optional[RecurrentState] = None
    if cfg.recurrent:
        new_cells = {}
        h0, c0 = state.cells["lstm.aspp"]
        x, c_next = convlstm_step(_cell_params(params, "lstm.aspp"), x, h0, c0)
        new_cells["lstm.aspp"] = (x, c_next)

    h2, w2 = cfg.stage_size(1)
    up = ad.bilinear_upsample(x, h2, w2)
    skip = _conv_gn_relu(params, "dec.skip", skip_b)
    y = ad.concat([up, skip], axis=1)

    if cfg.recurrent:
        h1, c1 = state.cells["dec.lstm1"]
        y, c1n = convlstm_step(_cell_params(params, "dec.lstm1"), y, h1, c1)
        new_cells["dec.lstm1"] = (y, c1n)
        h2_, c2 = state.cells["dec.lstm2"]
        y, c2n = convlstm_step(_cell_params(params, "dec.lstm2"), y, h2_, c2)
        new_cells["dec.lstm2"] = (y, c2n)
        new_state = RecurrentState(new_cells)
    else:
        y = _conv_gn_relu(params, "dec.conv1", y, pad=1)
        y = _conv_gn_relu(params, "dec.conv2", y, pad=1)

    logits = ad.conv2d(y, params["head.w"], params["head.b"])
    logits = ad.bilinear_upsample(logits, cfg.input_h, cfg.input_w)
    return logits, new_state


# ---------------------------------------------------------------------------
# surgery
# ---------------------------------------------------------------------------

def extend_heads(model: ModelState, extra: Union[int, Sequence[str]],
                 seed: int) -> ModelState:
    """Add output channels for new semantic classes.

    Existing parameters are copied bit-identically; only the new classifier
    rows are initialized from the seed. ``extra`` counts (or names) the
    classes the extended model should have in total beyond the base two.
    """
    new_classes = _as_extra_classes(extra)
    old_classes = model.cfg.extra_classes
    if old_classes and tuple(new_classes[:len(old_classes)]) != old_classes:
        raise ConfigError(
            f"cannot extend {old_classes} to {new_classes}: existing head "
            f"channels must keep their meaning")
    if len(new_classes) < len(old_classes):
        raise ConfigError(f"model already has {len(old_classes)} extra heads")
    cfg = replace(model.cfg, extra_classes=new_classes)
    out = model.clone()
    n_new = cfg.num_heads - model.cfg.num_heads
    if n_new:
        dc = cfg.decoder_channels
        w_new = _init_param("head.w.ext", (n_new, dc, 1, 1), seed, model.dtype)
        b_new = np.full((n_new,), -1.0, dtype=model.dtype)
        w = np.concatenate([out.params["head.w"].data, w_new], axis=0)
        b = np.concatenate([out.params["head.b"].data, b_new], axis=0)
        out.params["head.w"] = DTensor(w, requires_grad=True, name="head.w")
        out.params["head.b"] = DTensor(b, requires_grad=True, name="head.b")
    out.cfg = cfg
    return out


def frozen_prefixes(cfg: NetConfig) -> Tuple[str, ...]:
    m = cfg.merge_stage()
    prefixes = tuple(f"enc{k}." for k in range(1, (4 if m == 5 else m) + 1))
    if m == 5:
        prefixes += ("aspp.",)
    return prefixes


def freeze_pre_correlation(model: ModelState) -> ModelState:
    """Flag every encoder parameter up to (and including) the merge point as
    non-trainable; backward then skips that subgraph entirely."""
    prefixes = frozen_prefixes(model.cfg)
    for name, p in model.params.items():
        if name.startswith(prefixes):
            p.trainable = False
            p.requires_grad = False
    return model
