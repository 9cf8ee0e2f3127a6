"""Model assembly, forward contracts, ConvLSTM, head surgery, freezing."""
import numpy as np
import pytest

from distinctnet import autodiff as ad
from distinctnet.autodiff import DTensor
from distinctnet.errors import ConfigError, StateError, UsageError
from distinctnet.net import (
    ModelState, NetConfig, RecurrentState, build_distinctnet, convlstm_step,
    count_params, extend_heads, forward_pair, freeze_pre_correlation,
    frozen_prefixes, init_recurrent_state, parameter_shapes,
)


def tiny_cfg(**kw):
    base = dict(input_h=32, input_w=32, stage_channels=(4, 8, 8, 8),
                decoder_channels=8, aspp_rates=(1, 2))
    base.update(kw)
    return NetConfig(**base)


def rand_images(rng, n, cfg):
    return (DTensor(rng.random((n, 3, cfg.input_h, cfg.input_w)).astype(np.float32)),
            DTensor(rng.random((n, 3, cfg.input_h, cfg.input_w)).astype(np.float32)))


# =============================================================================
# shape-arithmetic oracle for parameter counts
# =============================================================================

def param_count_oracle(cfg: NetConfig) -> int:
    """Closed-form sum over layer shapes, written independently of the
    parameter table in net.py."""
    def conv_gn(cout, cin, k):
        return cout * cin * k * k + 2 * cout

    sc = cfg.stage_channels
    total = 0
    cin = 3
    for k in range(4):
        cout = sc[k]
        total += conv_gn(cout, cin, 3) + conv_gn(cout, cout, 3) + conv_gn(cout, cin, 1)
        cin = cout

    if cfg.corr_after == "aspp":
        cm = 2 * cfg.decoder_channels
        mh, mw = cfg.input_h // 16, cfg.input_w // 16
    else:
        idx = int(cfg.corr_after[-1])
        cm = sc[idx - 1]
        mh, mw = cfg.input_h >> idx, cfg.input_w >> idx
    if cfg.merge == "correlation":
        total += conv_gn(cm, mh * mw + 2 * cm, 1)
    else:
        total += cm * cm + conv_gn(cm, 2 * cm, 1)

    ao = 2 * cfg.decoder_channels
    total += conv_gn(ao, sc[3], 1)                      # 1x1 branch
    total += len(cfg.aspp_rates) * conv_gn(ao, sc[3], 3)  # dilated branches
    total += conv_gn(ao, sc[3], 1)                      # pooled branch
    total += conv_gn(ao, (2 + len(cfg.aspp_rates)) * ao, 1)

    dc = cfg.decoder_channels
    total += conv_gn(8, sc[0], 1)                       # skip reduction
    if cfg.recurrent:
        def lstm(cx, ch):
            return 4 * (ch * cx * 9 + ch * ch * 9 + ch)
        total += lstm(ao, ao) + lstm(ao + 8, dc) + lstm(dc, dc)
    else:
        total += conv_gn(dc, ao + 8, 3) + conv_gn(dc, dc, 3)

    heads = 2 + len(cfg.extra_classes)
    total += heads * dc + heads
    return total


# =============================================================================
# build / count
# =============================================================================

class TestBuild:
    def test_two_seeds_same_names_different_values(self):
        cfg = tiny_cfg()
        m1 = build_distinctnet(cfg, seed=1)
        m2 = build_distinctnet(cfg, seed=2)
        assert set(m1.params) == set(m2.params)
        diffs = [k for k in m1.params
                 if m1.params[k].ndim > 1
                 and not np.array_equal(m1.params[k].data, m2.params[k].data)]
        assert diffs, "reseeding must change weight values"

    def test_same_seed_bit_identical(self):
        cfg = tiny_cfg()
        m1 = build_distinctnet(cfg, seed=5)
        m2 = build_distinctnet(cfg, seed=5)
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)

    def test_extra_heads_grow_classifier(self):
        cfg = tiny_cfg(extra_classes=3)
        model = build_distinctnet(cfg, seed=0)
        assert model.params["head.w"].shape[0] == 5
        assert cfg.extra_classes == ("manipulator", "object", "distractor")

    def test_four_extras_include_gripper(self):
        cfg = tiny_cfg(extra_classes=4)
        assert "gripper" in cfg.extra_classes

    def test_named_extras(self):
        cfg = tiny_cfg(extra_classes=("manipulator", "object", "gripper"))
        assert cfg.num_heads == 5

    def test_indivisible_input_rejected(self):
        with pytest.raises(ConfigError, match="divisible"):
            NetConfig(input_h=30, input_w=96)

    @pytest.mark.parametrize("placement", ["block1", "block2", "block3", "block4", "aspp"])
    @pytest.mark.parametrize("merge", ["correlation", "co_attention"])
    def test_count_matches_shape_oracle(self, placement, merge):
        cfg = tiny_cfg(corr_after=placement, merge=merge)
        model = build_distinctnet(cfg, seed=0)
        assert count_params(model) == param_count_oracle(cfg)

    def test_count_matches_oracle_default_and_recurrent(self):
        for cfg in (NetConfig(), NetConfig(recurrent=True),
                    NetConfig(extra_classes=2)):
            model = build_distinctnet(cfg, seed=0)
            assert count_params(model) == param_count_oracle(cfg)

    def test_count_single_conv_example(self):
        # 3x3 conv 2->4 with bias: 4*2*9 + 4 = 76
        w = DTensor(np.zeros((4, 2, 3, 3)))
        b = DTensor(np.zeros(4))
        model = ModelState(cfg=tiny_cfg(), params={"w": w, "b": b})
        assert count_params(model) == 76

    def test_count_empty_model(self):
        assert count_params(ModelState(cfg=tiny_cfg(), params={})) == 0


# =============================================================================
# forward contracts
# =============================================================================

class TestForward:
    @pytest.mark.parametrize("placement", ["block1", "block2", "block3", "block4", "aspp"])
    def test_logit_shape_all_placements(self, placement):
        cfg = tiny_cfg(corr_after=placement, extra_classes=2)
        model = build_distinctnet(cfg, seed=0)
        rng = np.random.default_rng(0)
        a, b = rand_images(rng, 2, cfg)
        with ad.no_grad():
            logits, state = forward_pair(model, a, b)
        assert logits.shape == (2, 4, cfg.input_h, cfg.input_w)
        assert state is None

    def test_co_attention_forward(self):
        cfg = tiny_cfg(merge="co_attention")
        model = build_distinctnet(cfg, seed=0)
        rng = np.random.default_rng(1)
        a, b = rand_images(rng, 1, cfg)
        with ad.no_grad():
            logits, _ = forward_pair(model, a, b)
        assert logits.shape == (1, 2, cfg.input_h, cfg.input_w)

    def test_siamese_sharing_encoder_activations(self):
        cfg = tiny_cfg()
        model = build_distinctnet(cfg, seed=3)
        rng = np.random.default_rng(3)
        a, b = rand_images(rng, 1, cfg)
        t1, t2 = {}, {}
        with ad.no_grad():
            forward_pair(model, a, b, trace=t1)
            forward_pair(model, b, a, trace=t2)
        m = cfg.merge_stage()
        for k in range(1, m + 1):
            np.testing.assert_array_equal(t1[f"enc{k}.a"], t2[f"enc{k}.b"])
            np.testing.assert_array_equal(t1[f"enc{k}.b"], t2[f"enc{k}.a"])

    def test_state_on_non_recurrent_rejected(self):
        cfg = tiny_cfg()
        model = build_distinctnet(cfg, seed=0)
        rng = np.random.default_rng(0)
        a, b = rand_images(rng, 1, cfg)
        state = init_recurrent_state(tiny_cfg(recurrent=True), 1)
        with pytest.raises(UsageError):
            forward_pair(model, a, b, state)

    def test_state_shape_mismatch_rejected(self):
        cfg = tiny_cfg(recurrent=True)
        model = build_distinctnet(cfg, seed=0)
        rng = np.random.default_rng(0)
        a, b = rand_images(rng, 1, cfg)
        bad = init_recurrent_state(cfg, 2)  # batch mismatch
        with pytest.raises(StateError):
            forward_pair(model, a, b, bad)

    def test_recurrent_statefulness_witness(self):
        cfg = tiny_cfg(recurrent=True)
        model = build_distinctnet(cfg, seed=0)
        rng = np.random.default_rng(7)
        a, b = rand_images(rng, 1, cfg)
        c, d = rand_images(rng, 1, cfg)
        with ad.no_grad():
            _, s1 = forward_pair(model, a, b)
            threaded, _ = forward_pair(model, c, d, s1)
            fresh, _ = forward_pair(model, c, d)
        assert not np.allclose(threaded.data, fresh.data)

    def test_end_to_end_gradcheck_small(self):
        cfg = NetConfig(input_h=16, input_w=16, stage_channels=(4, 4, 8, 8),
                        decoder_channels=4, aspp_rates=(1, 2))
        model = build_distinctnet(cfg, seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        a = DTensor(rng.random((1, 3, 16, 16)))
        b = DTensor(rng.random((1, 3, 16, 16)))
        names = sorted(model.params)
        probe = [model.params[n] for n in names[::6]]

        def closure(ts):
            logits, _ = forward_pair(model, a, b)
            return ad.sum_(logits)
        rep = ad.grad_check(closure, probe, tol=1e-3, max_probes_per_input=4,
                            rng=np.random.default_rng(1))
        assert rep.passed, rep


# =============================================================================
# ConvLSTM cell
# =============================================================================

def zero_cell(cx, ch, dtype=np.float64):
    params = {}
    for g in "ifog":
        params[f"wx{g}"] = DTensor(np.zeros((ch, cx, 3, 3), dtype=dtype))
        params[f"wh{g}"] = DTensor(np.zeros((ch, ch, 3, 3), dtype=dtype))
        params[f"b{g}"] = DTensor(np.zeros(ch, dtype=dtype))
    return params


class TestConvLSTM:
    def test_zero_weights_closed_form(self):
        rng = np.random.default_rng(0)
        cell = zero_cell(2, 2)
        x = DTensor(rng.standard_normal((1, 2, 4, 4)))
        h = DTensor(rng.standard_normal((1, 2, 4, 4)))
        c = DTensor(rng.standard_normal((1, 2, 4, 4)))
        h2, c2 = convlstm_step(cell, x, h, c)
        np.testing.assert_allclose(c2.data, 0.5 * c.data, atol=1e-12)
        np.testing.assert_allclose(h2.data, 0.5 * np.tanh(0.5 * c.data), atol=1e-12)

    def test_all_zero_inputs(self):
        cell = zero_cell(2, 2)
        z = DTensor(np.zeros((1, 2, 3, 3)))
        h2, c2 = convlstm_step(cell, z, z, z)
        np.testing.assert_array_equal(h2.data, 0.0)
        np.testing.assert_array_equal(c2.data, 0.0)

    def test_matches_gate_oracle(self):
        rng = np.random.default_rng(5)
        cx, ch = 3, 2
        cell = {}
        for g in "ifog":
            cell[f"wx{g}"] = DTensor(rng.standard_normal((ch, cx, 3, 3)) * 0.3)
            cell[f"wh{g}"] = DTensor(rng.standard_normal((ch, ch, 3, 3)) * 0.3)
            cell[f"b{g}"] = DTensor(rng.standard_normal(ch) * 0.1)
        x = DTensor(rng.standard_normal((1, cx, 4, 4)))
        h = DTensor(rng.standard_normal((1, ch, 4, 4)))
        c = DTensor(rng.standard_normal((1, ch, 4, 4)))
        h2, c2 = convlstm_step(cell, x, h, c)

        # explicit gate-by-gate oracle
        def conv(xa, wa):
            out = ad.conv2d(DTensor(xa), DTensor(wa), pad=1)
            return out.data

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))
        gates = {}
        for g in "ifog":
            pre = (conv(x.data, cell[f"wx{g}"].data)
                   + conv(h.data, cell[f"wh{g}"].data)
                   + cell[f"b{g}"].data.reshape(1, ch, 1, 1))
            gates[g] = np.tanh(pre) if g == "g" else sig(pre)
        c_want = gates["f"] * c.data + gates["i"] * gates["g"]
        h_want = gates["o"] * np.tanh(c_want)
        np.testing.assert_allclose(c2.data, c_want, atol=1e-6)
        np.testing.assert_allclose(h2.data, h_want, atol=1e-6)

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        cx, ch = 2, 2
        tensors = []
        names = []
        for g in "ifog":
            for kind, shape in [("wx", (ch, cx, 3, 3)), ("wh", (ch, ch, 3, 3)),
                                ("b", (ch,))]:
                t = DTensor(rng.standard_normal(shape) * 0.4, requires_grad=True)
                tensors.append(t)
                names.append(f"{kind}{g}")
        x = DTensor(rng.standard_normal((1, cx, 3, 3)), requires_grad=True)
        h = DTensor(rng.standard_normal((1, ch, 3, 3)), requires_grad=True)
        c = DTensor(rng.standard_normal((1, ch, 3, 3)), requires_grad=True)
        tensors += [x, h, c]

        def closure(ts):
            cell = dict(zip(names, ts[:12]))
            h2, c2 = convlstm_step(cell, ts[12], ts[13], ts[14])
            return ad.sum_(ad.add(ad.mul(h2, h2), c2))
        rep = ad.grad_check(closure, tensors, tol=1e-4, max_probes_per_input=6,
                            rng=np.random.default_rng(4))
        assert rep.passed, rep

    def test_saturated_gates_degenerate_memory(self):
        # forget bias +20 opens f, input bias -20 closes i: c carries through
        # and h = 0.5 * tanh(c) is a pure function of the decaying cell
        cell = zero_cell(2, 2)
        cell["bf"] = DTensor(np.full(2, 20.0))
        cell["bi"] = DTensor(np.full(2, -20.0))
        rng = np.random.default_rng(11)
        c0 = rng.standard_normal((1, 2, 3, 3))
        h = DTensor(np.zeros((1, 2, 3, 3)))
        c = DTensor(c0)
        f = 1.0 / (1.0 + np.exp(-20.0))
        for t in range(1, 4):
            h, c = convlstm_step(cell, DTensor(np.zeros((1, 2, 3, 3))), h, c)
            np.testing.assert_allclose(c.data, (f ** t) * c0, atol=1e-7)
            np.testing.assert_allclose(h.data, 0.5 * np.tanh(c.data), atol=1e-7)


# =============================================================================
# extend_heads
# =============================================================================

class TestExtendHeads:
    def test_base_logits_bit_identical(self):
        cfg = tiny_cfg()
        model = build_distinctnet(cfg, seed=0)
        rng = np.random.default_rng(2)
        a, b = rand_images(rng, 1, cfg)
        with ad.no_grad():
            before, _ = forward_pair(model, a, b)
        bigger = extend_heads(model, 2, seed=99)
        with ad.no_grad():
            after, _ = forward_pair(bigger, a, b)
        assert after.shape[1] == 4
        np.testing.assert_array_equal(after.data[:, :2], before.data)

    def test_existing_params_bit_identical(self):
        model = build_distinctnet(tiny_cfg(), seed=0)
        bigger = extend_heads(model, 3, seed=1)
        for k, p in model.params.items():
            if k.startswith("head."):
                np.testing.assert_array_equal(
                    bigger.params[k].data[:p.shape[0]], p.data)
            else:
                np.testing.assert_array_equal(bigger.params[k].data, p.data)

    def test_extend_by_three_names(self):
        bigger = extend_heads(build_distinctnet(tiny_cfg(), seed=0), 3, seed=1)
        assert bigger.cfg.extra_classes == ("manipulator", "object", "distractor")

    def test_extend_by_four_includes_gripper(self):
        bigger = extend_heads(build_distinctnet(tiny_cfg(), seed=0), 4, seed=1)
        assert "gripper" in bigger.cfg.extra_classes
        assert bigger.params["head.w"].shape[0] == 6

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            extend_heads(build_distinctnet(tiny_cfg(), seed=0), 5, seed=1)


# =============================================================================
# freezing
# =============================================================================

class TestFreeze:
    def test_one_step_leaves_frozen_params_bit_identical(self):
        cfg = tiny_cfg()
        model = build_distinctnet(cfg, seed=0)
        freeze_pre_correlation(model)
        frozen = {k: p.data.copy() for k, p in model.params.items()
                  if not p.trainable}
        assert frozen
        rng = np.random.default_rng(0)
        a, b = rand_images(rng, 1, cfg)
        logits, _ = forward_pair(model, a, b)
        labels = np.zeros((1, cfg.input_h, cfg.input_w), dtype=np.int64)
        loss = ad.cross_entropy_loss(ad.narrow(logits, 1, 0, 2), labels)
        loss.backward()
        state = ad.AdamWState(lr=0.1)
        ad.adamw_step(model.params, state)
        for k, v in frozen.items():
            np.testing.assert_array_equal(model.params[k].data, v)

    def test_trainable_count_drop_matches_shape_arithmetic(self):
        cfg = tiny_cfg(corr_after="block2")
        model = build_distinctnet(cfg, seed=0)
        before = sum(p.size for p in model.params.values() if p.trainable)
        freeze_pre_correlation(model)
        after = sum(p.size for p in model.params.values() if p.trainable)

        def conv_gn(cout, cin, k):
            return cout * cin * k * k + 2 * cout
        sc = cfg.stage_channels
        expect = 0
        cin = 3
        for k in range(2):
            expect += (conv_gn(sc[k], cin, 3) + conv_gn(sc[k], sc[k], 3)
                       + conv_gn(sc[k], cin, 1))
            cin = sc[k]
        assert before - after == expect

    def test_aspp_placement_freezes_everything_before_decoder(self):
        cfg = tiny_cfg(corr_after="aspp")
        model = build_distinctnet(cfg, seed=0)
        freeze_pre_correlation(model)
        assert frozen_prefixes(cfg) == ("enc1.", "enc2.", "enc3.", "enc4.", "aspp.")
        for k, p in model.params.items():
            if k.startswith(("enc", "aspp.")):
                assert not p.trainable, k
            if k.startswith(("merge.", "dec.", "head.")):
                assert p.trainable, k
