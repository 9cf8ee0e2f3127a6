"""Tests for the differentiable array engine.

Derived expectations are computed by independent oracles defined at the top
of this file (nested-loop convolution, closed-form bilinear interpolation,
explicit softmax/sigmoid losses) and never by the code under test.
"""
import numpy as np
import pytest

from distinctnet import autodiff as ad
from distinctnet.autodiff import DTensor
from distinctnet.errors import (
    ConfigError, DataError, DimensionError, TrainingError, UsageError,
)


# =============================================================================
# Oracles
# =============================================================================

def conv2d_loop_oracle(x, w, b=None, stride=1, pad=1, dilation=1):
    """Direct nested-loop cross-correlation, double precision."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[ni, ci, i * stride + u * dilation,
                                           j * stride + v * dilation]
                                        * w[ki, ci, u, v])
                    out[ni, ki, i, j] = acc
            if b is not None:
                out[ni, ki] += b[ki]
    return out


def bilinear_oracle(x, out_h, out_w):
    """Per-pixel closed-form align-corners-false bilinear interpolation."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for i in range(out_h):
        sy = (i + 0.5) * h / out_h - 0.5
        y0 = int(np.clip(np.floor(sy), 0, h - 1))
        y1 = min(y0 + 1, h - 1)
        fy = sy - np.floor(sy) if 0 <= sy <= h - 1 else (0.0 if sy < 0 else 1.0)
        fy = max(0.0, min(1.0, sy - y0))
        for j in range(out_w):
            sx = (j + 0.5) * w / out_w - 0.5
            x0 = int(np.clip(np.floor(sx), 0, w - 1))
            x1 = min(x0 + 1, w - 1)
            fx = max(0.0, min(1.0, sx - x0))
            top = x[:, :, y0, x0] * (1 - fx) + x[:, :, y0, x1] * fx
            bot = x[:, :, y1, x0] * (1 - fx) + x[:, :, y1, x1] * fx
            out[:, :, i, j] = top * (1 - fy) + bot * fy
    return out


def cross_entropy_oracle(logits, labels):
    """Explicit softmax + log pick, mean over pixels."""
    n, k, h, w = logits.shape
    total = 0.0
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                z = logits[ni, :, i, j]
                p = np.exp(z - z.max())
                p /= p.sum()
                total += -np.log(p[labels[ni, i, j]])
    return total / (n * h * w)


def bce_oracle(logits, targets):
    """Direct sigmoid binary cross entropy, mean over all elements."""
    s = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    return float(np.mean(-(targets * np.log(s) + (1 - targets) * np.log(1 - s))))


def rand(rng, *shape):
    return rng.standard_normal(shape)


# =============================================================================
# conv2d
# =============================================================================

class TestConv2d:
    def test_box_sum_identity(self):
        x = DTensor(np.ones((1, 1, 3, 3)))
        w = DTensor(np.ones((1, 1, 3, 3)))
        y = ad.conv2d(x, w, pad=1, stride=1).data
        assert y[0, 0, 1, 1] == 9
        for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert y[0, 0, i, j] == 4

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = DTensor(rand(rng, 2, 1, 4, 5))
        w = DTensor(np.ones((1, 1, 1, 1)))
        y = ad.conv2d(x, w).data
        np.testing.assert_array_equal(y, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rand(rng, 2, 3, 5, 5)
        w = rand(rng, 4, 3, 3, 3)
        b = rand(rng, 4)
        got = ad.conv2d(DTensor(x), DTensor(w), DTensor(b), pad=1).data
        want = conv2d_loop_oracle(x, w, b, pad=1)
        np.testing.assert_allclose(got, want, atol=1e-10)

    @pytest.mark.parametrize("stride,pad,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2)])
    def test_loop_oracle_strides(self, stride, pad, dilation):
        rng = np.random.default_rng(stride * 7 + pad * 3 + dilation)
        x = rand(rng, 1, 2, 7, 6)
        w = rand(rng, 3, 2, 3, 3)
        got = ad.conv2d(DTensor(x), DTensor(w), stride=stride, pad=pad,
                        dilation=dilation).data
        want = conv2d_loop_oracle(x, w, stride=stride, pad=pad, dilation=dilation)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_shape_mismatch_names_axes(self):
        x = DTensor(np.zeros((1, 3, 4, 4)))
        w = DTensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(DimensionError, match="channel"):
            ad.conv2d(x, w, pad=1)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError, match="odd"):
            ad.conv2d(DTensor(np.zeros((1, 1, 4, 4))),
                      DTensor(np.zeros((1, 1, 2, 2))))

    def test_gradients_match_oracle_gradients(self):
        # weight gradient of sum(conv) equals conv of ones with input patches
        rng = np.random.default_rng(3)
        x = DTensor(rand(rng, 1, 2, 4, 4), requires_grad=True)
        w = DTensor(rand(rng, 2, 2, 3, 3), requires_grad=True)
        y = ad.sum_(ad.conv2d(x, w, pad=1))
        y.backward()
        assert x.grad.shape == x.shape and w.grad.shape == w.shape


# =============================================================================
# bilinear_upsample
# =============================================================================

class TestBilinearUpsample:
    def test_constant_stays_constant(self):
        x = DTensor(np.full((1, 2, 3, 3), 4.25))
        y = ad.bilinear_upsample(x, 7, 9).data
        np.testing.assert_allclose(y, 4.25)

    def test_convexity_and_corner_order(self):
        x = DTensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
        y = ad.bilinear_upsample(x, 4, 4).data[0, 0]
        assert y.min() >= 0.0 and y.max() <= 3.0
        assert y[0, 0] < y[0, 3] < y[3, 0] < y[3, 3]

    def test_matches_closed_form_oracle(self):
        rng = np.random.default_rng(11)
        x = rand(rng, 1, 2, 3, 3)
        got = ad.bilinear_upsample(DTensor(x), 6, 6).data
        want = bilinear_oracle(x, 6, 6)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_zero_target_rejected(self):
        with pytest.raises(DimensionError):
            ad.bilinear_upsample(DTensor(np.zeros((1, 1, 2, 2))), 0, 4)

    def test_identity_when_same_size(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 1, 1, 5, 4)
        got = ad.bilinear_upsample(DTensor(x), 5, 4).data
        np.testing.assert_allclose(got, x, atol=1e-12)


# =============================================================================
# activations
# =============================================================================

class TestActivations:
    def test_relu_values(self):
        y = ad.activation(DTensor(np.array([-1.0, 0.0, 2.0])), "relu").data
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert ad.activation(DTensor(np.array([0.0])), "sigmoid").data[0] == 0.5

    def test_tanh_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = DTensor(rand(rng, 8), requires_grad=True)
        report = ad.grad_check(lambda ts: ad.sum_(ad.tanh(ts[0])), [x], tol=1e-6)
        assert report.passed, report

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ad.activation(DTensor(np.zeros(3)), "swish")


# =============================================================================
# group_norm
# =============================================================================

class TestGroupNorm:
    def test_constant_input_collapses_to_zero(self):
        x = DTensor(np.full((2, 4, 3, 3), 7.0))
        y = ad.group_norm(x, 2, DTensor(np.ones(4)), DTensor(np.zeros(4))).data
        np.testing.assert_allclose(y, 0.0, atol=1e-6)

    def test_gamma_zero_gives_beta(self):
        rng = np.random.default_rng(1)
        x = DTensor(rand(rng, 1, 4, 2, 2))
        beta = np.array([1.0, -2.0, 0.5, 3.0])
        y = ad.group_norm(x, 4, DTensor(np.zeros(4)), DTensor(beta)).data
        for c in range(4):
            np.testing.assert_allclose(y[0, c], beta[c])

    def test_per_group_statistics(self):
        rng = np.random.default_rng(9)
        n, c, h, w, groups = 2, 8, 5, 5, 4
        x = rand(rng, n, c, h, w) * 3 + 1.5
        y = ad.group_norm(DTensor(x), groups, DTensor(np.ones(c)),
                          DTensor(np.zeros(c)), eps=1e-10).data
        yg = y.reshape(n, groups, c // groups, h, w)
        np.testing.assert_allclose(yg.mean(axis=(2, 3, 4)), 0.0, atol=1e-5)
        np.testing.assert_allclose(yg.var(axis=(2, 3, 4)), 1.0, atol=1e-5)

    def test_indivisible_groups_rejected(self):
        with pytest.raises(ConfigError):
            ad.group_norm(DTensor(np.zeros((1, 6, 2, 2))), 4,
                          DTensor(np.ones(6)), DTensor(np.zeros(6)))


# =============================================================================
# l2_normalize
# =============================================================================

class TestL2Normalize:
    def test_three_four_five(self):
        y = ad.l2_normalize(DTensor(np.array([3.0, 4.0])), axis=0).data
        np.testing.assert_allclose(y, [0.6, 0.8])

    def test_zero_vector_stays_zero(self):
        y = ad.l2_normalize(DTensor(np.zeros(4)), axis=0, eps=1e-12).data
        assert not np.any(np.isnan(y))
        np.testing.assert_array_equal(y, np.zeros(4))

    def test_scale_invariance(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            x = rand(rng, 3, 6).astype(np.float32)
            s = np.float32(rng.uniform(0.1, 10.0))
            a = ad.l2_normalize(DTensor(x), axis=1).data
            b = ad.l2_normalize(DTensor(x * s), axis=1).data
            np.testing.assert_allclose(a, b, atol=1e-6)


# =============================================================================
# losses
# =============================================================================

class TestCrossEntropy:
    def test_uniform_logits_give_log2(self):
        logits = DTensor(np.zeros((1, 2, 2, 2)))
        labels = np.zeros((1, 2, 2), dtype=np.int64)
        loss = ad.cross_entropy_loss(logits, labels).item()
        assert abs(loss - np.log(2)) < 1e-12

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 1, 0, 0] = 40.0
        labels = np.ones((1, 1, 1), dtype=np.int64)
        assert ad.cross_entropy_loss(DTensor(logits), labels).item() < 1e-12

    def test_matches_explicit_oracle(self):
        rng = np.random.default_rng(17)
        logits = rand(rng, 1, 3, 2, 2)
        labels = rng.integers(0, 3, size=(1, 2, 2))
        got = ad.cross_entropy_loss(DTensor(logits), labels).item()
        want = cross_entropy_oracle(logits, labels)
        assert abs(got - want) < 1e-10

    def test_out_of_range_label_names_pixel(self):
        logits = DTensor(np.zeros((1, 2, 2, 2)))
        labels = np.zeros((1, 2, 2), dtype=np.int64)
        labels[0, 1, 0] = 5
        with pytest.raises(DataError, match=r"y=1, x=0"):
            ad.cross_entropy_loss(logits, labels)

    def test_finite_for_extreme_logits(self):
        rng = np.random.default_rng(23)
        logits = rng.uniform(-50, 50, size=(1, 3, 4, 4))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        assert np.isfinite(ad.cross_entropy_loss(DTensor(logits), labels).item())


class TestBCEMultilabel:
    def test_zero_logit_target_one(self):
        loss = ad.bce_multilabel_loss(DTensor(np.zeros((1, 1, 1, 1))),
                                      np.ones((1, 1, 1, 1))).item()
        assert abs(loss - np.log(2)) < 1e-12

    def test_large_logit_no_overflow(self):
        loss = ad.bce_multilabel_loss(DTensor(np.full((1, 1, 1, 1), 20.0)),
                                      np.ones((1, 1, 1, 1))).item()
        assert 0 <= loss < 1e-8

    def test_matches_sigmoid_oracle(self):
        rng = np.random.default_rng(29)
        logits = rand(rng, 2, 3, 2, 2)
        targets = rng.integers(0, 2, size=(2, 3, 2, 2)).astype(np.float64)
        got = ad.bce_multilabel_loss(DTensor(logits), targets).item()
        assert abs(got - bce_oracle(logits, targets)) < 1e-8

    def test_non_binary_target_rejected(self):
        with pytest.raises(DataError):
            ad.bce_multilabel_loss(DTensor(np.zeros((1, 1, 1, 1))),
                                   np.full((1, 1, 1, 1), 0.5))

    def test_finite_for_extreme_logits(self):
        rng = np.random.default_rng(31)
        logits = rng.uniform(-50, 50, size=(2, 2, 3, 3))
        targets = rng.integers(0, 2, size=(2, 2, 3, 3)).astype(float)
        assert np.isfinite(ad.bce_multilabel_loss(DTensor(logits), targets).item())


# =============================================================================
# AdamW
# =============================================================================

class TestAdamW:
    def test_single_step_hand_oracle(self):
        # theta=1, grad=1, lr=0.1, wd=0: bias-corrected unit update -> 0.9
        p = DTensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = ad.AdamWState(lr=0.1, weight_decay=0.0)
        ad.adamw_step({"p": p}, state)
        assert abs(p.data[0] - 0.9) < 1e-6
        assert state.t == 1

    def test_pure_decay(self):
        p = DTensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([0.0])
        state = ad.AdamWState(lr=1e-3, weight_decay=0.01)
        ad.adamw_step({"p": p}, state)
        np.testing.assert_allclose(p.data, 2.0 * (1.0 - 1e-5), rtol=1e-12)

    def test_two_parameter_groups(self):
        a = DTensor(np.array([1.0]), requires_grad=True)
        b = DTensor(np.array([1.0]), requires_grad=True)
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        state = ad.AdamWState(lr=1e-3, weight_decay=0.0,
                              lr_overrides={"backbone": 1e-4})
        ad.adamw_step({"main": a, "backbone": b}, state)
        assert abs(a.data[0] - (1.0 - 1e-3)) < 1e-9
        assert abs(b.data[0] - (1.0 - 1e-4)) < 1e-9

    def test_missing_grad_names_parameter(self):
        p = DTensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(TrainingError, match="lonely"):
            ad.adamw_step({"lonely": p}, ad.AdamWState())

    def test_lr_zero_leaves_params_but_increments_t(self):
        p = DTensor(np.array([3.0]), requires_grad=True)
        p.grad = np.array([1.5])
        state = ad.AdamWState(lr=0.0, weight_decay=0.01)
        ad.adamw_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [3.0])
        assert state.t == 1

    def test_frozen_parameter_skipped(self):
        p = DTensor(np.array([1.0]), requires_grad=True)
        p.trainable = False
        state = ad.AdamWState(lr=0.1)
        ad.adamw_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [1.0])


# =============================================================================
# grad_check harness
# =============================================================================

class TestGradCheck:
    def test_linear_closure(self):
        x = DTensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        report = ad.grad_check(lambda ts: ad.sum_(ad.mul(ts[0], 2.0)), [x], tol=1e-9)
        assert report.passed and report.max_rel_error < 1e-9

    def test_conv_relu_sum_chain(self):
        rng = np.random.default_rng(41)
        x = DTensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True, name="x")
        w = DTensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True, name="w")

        def closure(ts):
            return ad.sum_(ad.relu(ad.conv2d(ts[0], ts[1], pad=1)))
        report = ad.grad_check(closure, [x, w], tol=1e-4)
        assert report.passed, report

    def test_corrupted_backward_fails(self):
        def corrupted_double(t):
            out = t.data * 2.0

            def backward(g):
                t.accumulate_grad(g * 2.0 * 1.01)  # deliberately wrong
            from distinctnet.autodiff.tensor import make_node
            return make_node(out, (t,), backward)

        x = DTensor(np.ones(5), requires_grad=True)
        report = ad.grad_check(lambda ts: ad.sum_(corrupted_double(ts[0])), [x],
                               tol=1e-4)
        assert not report.passed

    def test_non_scalar_closure_rejected(self):
        x = DTensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            ad.grad_check(lambda ts: ad.mul(ts[0], 1.0), [x])


# =============================================================================
# graph semantics
# =============================================================================

class TestGraph:
    def test_inputs_never_mutated(self):
        rng = np.random.default_rng(43)
        x = DTensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        before = x.data.copy()
        w = DTensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        loss = ad.mean(ad.relu(ad.conv2d(x, w, pad=1)))
        loss.backward()
        np.testing.assert_array_equal(x.data, before)

    def test_grad_populated_on_all_reachable(self):
        x = DTensor(np.ones(3), requires_grad=True)
        y = DTensor(np.ones(3), requires_grad=True)
        loss = ad.sum_(ad.mul(ad.add(x, y), y))
        loss.backward()
        assert x.grad is not None and y.grad is not None

    def test_reused_tensor_accumulates_both_paths(self):
        x = DTensor(np.array([2.0]), requires_grad=True)
        loss = ad.sum_(ad.add(ad.mul(x, 3.0), ad.mul(x, x)))
        loss.backward()
        np.testing.assert_allclose(x.grad, [3.0 + 2 * 2.0])

    def test_no_grad_blocks_recording(self):
        x = DTensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, 2.0)
        assert y._backward is None and not y.requires_grad

    def test_backward_from_non_scalar_rejected(self):
        x = DTensor(np.ones(3), requires_grad=True)
        y = ad.mul(x, 2.0)
        with pytest.raises(UsageError):
            y.backward()


# =============================================================================
# checkpoint round trip
# =============================================================================

class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(47)
        params = {
            "enc1.conv1.w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
            "head.b": rng.standard_normal(2).astype(np.float32),
            "head.w": rng.standard_normal((2, 8, 1, 1)).astype(np.float32),
        }
        path = tmp_path / "model.dnkt"
        ad.save_checkpoint(params, path)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(params)
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k])

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.dnkt"
        ad.save_checkpoint({"a": np.zeros(2, dtype=np.float32)}, path)
        raw = path.read_bytes()
        assert raw[:4] == b"DNKT"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 1

    def test_lexicographic_order(self, tmp_path):
        path = tmp_path / "m.dnkt"
        ad.save_checkpoint({"b": np.zeros(1, dtype=np.float32),
                            "a": np.zeros(1, dtype=np.float32)}, path)
        raw = path.read_bytes()
        assert raw.index(b"a\x01") < raw.index(b"b\x01")

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.dnkt"
        path.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(DataError, match="magic"):
            ad.load_checkpoint(path)


# =============================================================================
# per-op gradient sweeps (double precision, randomized shapes)
# =============================================================================

def _away_from(x, margin=1e-3):
    """Push values away from 0 so relu/max kinks are not probed."""
    return np.where(np.abs(x) < margin, x + np.sign(x + 0.5) * margin, x)


OP_CASES = [
    ("conv2d", lambda ts: ad.sum_(ad.conv2d(ts[0], ts[1], ts[2], pad=1)),
     lambda rng: [((1, 2, 4, 4), None), ((3, 2, 3, 3), None), ((3,), None)]),
    ("bilinear", lambda ts: ad.sum_(ad.bilinear_upsample(ts[0], 5, 7)),
     lambda rng: [((1, 2, 3, 4), None)]),
    ("relu", lambda ts: ad.sum_(ad.relu(ts[0])),
     lambda rng: [((2, 5), _away_from)]),
    ("sigmoid", lambda ts: ad.sum_(ad.sigmoid(ts[0])),
     lambda rng: [((2, 5), None)]),
    ("tanh", lambda ts: ad.sum_(ad.tanh(ts[0])),
     lambda rng: [((2, 5), None)]),
    ("group_norm", lambda ts: ad.sum_(ad.mul(ad.group_norm(ts[0], 2, ts[1], ts[2]),
                                             ts[0])),
     lambda rng: [((2, 4, 3, 3), None), ((4,), None), ((4,), None)]),
    ("l2_normalize", lambda ts: ad.sum_(ad.mul(ad.l2_normalize(ts[0], 1), ts[0])),
     lambda rng: [((2, 5), None)]),
    ("softmax", lambda ts: ad.sum_(ad.mul(ad.softmax(ts[0], 1), ts[0])),
     lambda rng: [((2, 4), None)]),
    ("matmul", lambda ts: ad.sum_(ad.matmul(ts[0], ts[1])),
     lambda rng: [((2, 3, 4), None), ((2, 4, 2), None)]),
    ("softplus", lambda ts: ad.sum_(ad.softplus(ts[0])),
     lambda rng: [((7,), None)]),
]


@pytest.mark.parametrize("name,closure,spec", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradcheck_many_seeds(name, closure, spec):
    failures = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        tensors = []
        for shape, fixup in spec(rng):
            data = rng.standard_normal(shape)
            if fixup is not None:
                data = fixup(data)
            tensors.append(DTensor(data, requires_grad=True))
        report = ad.grad_check(closure, tensors, tol=1e-4,
                               max_probes_per_input=12,
                               rng=np.random.default_rng(seed))
        if not report.passed:
            failures.append((seed, report.max_rel_error))
    assert not failures, f"{name} failed gradcheck on seeds {failures}"
