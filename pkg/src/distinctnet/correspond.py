"""Feature matching between the two encoder streams.

Two interchangeable merge operations: a normalized global correlation volume
(the default) and a co-attention read-out kept for the architecture ablation.
Both are pure functions of their inputs and fully differentiable.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .errors import ConfigError, DimensionError

CORR_EPS = 1e-6


def raw_correlation(feat_a: DTensor, feat_b: DTensor, eps: float = CORR_EPS) -> DTensor:
    """Pre-normalized all-pairs dot products, before the channel re-norm.

    Output [N, Hf*Wf, Hf, Wf]: channel i2*Wf + j2 holds the similarity of
    B's location (i2, j2) against A's location at the spatial index. This
    intermediate transposes exactly under an A/B swap.
    """
    if feat_a.shape != feat_b.shape:
        raise DimensionError(
            f"correlation inputs must match, got {feat_a.shape} vs {feat_b.shape}")
    if feat_a.ndim != 4:
        raise DimensionError(f"correlation wants NCHW features, got ndim {feat_a.ndim}")
    n, c, hf, wf = feat_a.shape
    loc = hf * wf
    a_hat = ad.l2_normalize(feat_a, axis=1, eps=eps)
    b_hat = ad.l2_normalize(feat_b, axis=1, eps=eps)
    a_flat = ad.reshape(a_hat, (n, c, loc))
    b_flat = ad.reshape(b_hat, (n, c, loc))
    # [N, L, C] @ [N, C, L] -> [N, L(b), L(a)]
    m = ad.matmul(ad.transpose(b_flat, (0, 2, 1)), a_flat)
    return ad.reshape(m, (n, loc, hf, wf))


def global_correlation(feat_a: DTensor, feat_b: DTensor, eps: float = CORR_EPS,
                       relu_before_postnorm: bool = False) -> DTensor:
    """Normalized correlation volume between two feature maps.

    Pipeline: L2-normalize per-location feature vectors of both maps, take
    all-pairs dot products, L2-normalize the resulting volume along its
    channel axis, apply ReLU. ``relu_before_postnorm`` swaps the last two
    steps (the ablation variant); the default follows post-norm-then-ReLU.
    Every output entry lands in [0, 1].
    """
    m = raw_correlation(feat_a, feat_b, eps=eps)
    if relu_before_postnorm:
        return ad.l2_normalize(ad.relu(m), axis=1, eps=eps)
    return ad.relu(ad.l2_normalize(m, axis=1, eps=eps))


def co_attention(feat_a: DTensor, feat_b: DTensor, w: DTensor) -> DTensor:
    """Attention read-out of B's features for every location of A.

    Affinity S = Vb^T W Va over flattened location axes, softmax over B's
    locations, attended output Za = Vb @ softmax(S) reshaped back to
    [N, C, Hf, Wf]. The caller concatenates [Za | feat_a] at the merge point.
    """
    if feat_a.shape != feat_b.shape:
        raise DimensionError(
            f"co_attention inputs must match, got {feat_a.shape} vs {feat_b.shape}")
    n, c, hf, wf = feat_a.shape
    if w.shape != (c, c):
        raise ConfigError(
            f"co_attention weight must be [{c},{c}] for {c}-channel features, "
            f"got {w.shape}")
    loc = hf * wf
    va = ad.reshape(feat_a, (n, c, loc))
    vb = ad.reshape(feat_b, (n, c, loc))
    # S[n, lb, la] = sum_cc Vb[n,:,lb]^T W Va[n,:,la]
    s = ad.matmul(ad.matmul(ad.transpose(vb, (0, 2, 1)), w), va)
    attn = ad.softmax(s, axis=1)
    za = ad.matmul(vb, attn)
    return ad.reshape(za, (n, c, hf, wf))
