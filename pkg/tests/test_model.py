import numpy as np
import pytest

from bcsenet import model as M
from bcsenet import tensor as T
from bcsenet.errors import CheckpointError, InvalidArgument, ShapeError

# published sizes for the width multipliers, baseline and attention variants
BASELINE_TARGETS = {1: 9_200, 3: 54_200, 6: 188_000, 8: 321_000}
ATTENTION_TARGETS = {1: 10_000, 3: 61_000, 6: 218_000, 8: 376_000}


def features(n=2, t=98, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return T.Tensor(rng.normal(size=(n, 1, 40, t)).astype(dtype))


class TestParameterCounts:
    @pytest.mark.parametrize("tau,target", sorted(BASELINE_TARGETS.items()))
    def test_baseline_within_two_percent(self, tau, target):
        count = M.count_params(M.ModelConfig(tau=tau, attention_mode="none"))
        assert abs(count / target - 1.0) < 0.02, f"tau={tau}: {count} vs {target}"

    @pytest.mark.parametrize("tau,target", sorted(ATTENTION_TARGETS.items()))
    def test_attention_within_fifteen_percent(self, tau, target):
        count = M.count_params(M.ModelConfig(tau=tau, attention_mode="se_tfwse"))
        assert abs(count / target - 1.0) < 0.15, f"tau={tau}: {count} vs {target}"

    def test_count_is_pure_function_of_config(self):
        cfg = M.ModelConfig(tau=3, seed=11)
        assert M.count_params(cfg) == M.count_params(M.ModelConfig(tau=3, seed=99))

    def test_monotone_in_tau(self):
        counts = [M.count_params(M.ModelConfig(tau=t)) for t in (1, 3, 6, 8)]
        assert counts == sorted(counts) and len(set(counts)) == 4

    @pytest.mark.parametrize("tau", [1, 3, 6, 8])
    def test_attention_overhead_matches_closed_form(self, tau):
        """Attention cost derived independently from the gate FC shapes."""
        def fc_pair(width, ratio, floor):
            h = max(width // ratio, floor)
            return width * h + h + h * width + width

        # frequency extents after stages 1 and 2; channel widths after 3 and 4
        expected = (fc_pair(20, 4, 2) + fc_pair(10, 4, 2)
                    + fc_pair(M.scaled_channels(tau, 16), 4, 4)
                    + fc_pair(M.scaled_channels(tau, 20), 4, 4))
        got = (M.count_params(M.ModelConfig(tau=tau, attention_mode="se_tfwse"))
               - M.count_params(M.ModelConfig(tau=tau, attention_mode="none")))
        assert got == expected

    def test_class_count_delta_is_head_width_plus_bias(self):
        for tau in (1, 3):
            a = M.count_params(M.ModelConfig(tau=tau, num_classes=12))
            b = M.count_params(M.ModelConfig(tau=tau, num_classes=24))
            assert b - a == (M.scaled_channels(tau, 32) + 1) * 12


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        cfg = M.ModelConfig(tau=1, seed=42)
        a = M.build_model(cfg)
        b = M.build_model(cfg)
        for (na, pa), (nb, pb) in zip(a.named_params(), b.named_params()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_different_seed_differs(self):
        a = M.build_model(M.ModelConfig(seed=1))
        b = M.build_model(M.ModelConfig(seed=2))
        assert a.stem_conv.weight.data.tobytes() != b.stem_conv.weight.data.tobytes()

    def test_invalid_configs_rejected(self):
        with pytest.raises(InvalidArgument):
            M.build_model(M.ModelConfig(num_classes=1))
        with pytest.raises(InvalidArgument):
            M.build_model(M.ModelConfig(attention_mode="eca"))
        with pytest.raises(InvalidArgument):
            M.build_model(M.ModelConfig(tau=-1))
        with pytest.raises(InvalidArgument):
            # frequency chain 30 -> 15 -> 8 breaks the 5-subband split
            M.build_model(M.ModelConfig(n_mels=30))

    def test_initialization_shapes(self):
        m = M.build_model(M.ModelConfig(tau=1))
        params = dict(m.named_params())
        assert params["stem.conv.weight"].shape == (16, 1, 5, 5)
        assert params["stage1.block0.pre_pw.weight"].shape == (8, 16, 1, 1)
        assert params["stage1.block0.ssn.gamma"].shape == (40,)  # 8 ch * 5 subbands
        assert params["head.fc.weight"].shape == (32, 12)
        assert all(p.requires_grad for p in params.values())


class TestForward:
    def test_logit_shape(self):
        m = M.build_model(M.ModelConfig(tau=1, num_classes=12))
        out = m.forward(features(n=2, t=98), "eval")
        assert out.shape == (2, 12)

    def test_accepts_other_time_extents(self):
        m = M.build_model(M.ModelConfig(tau=1))
        assert m.forward(features(n=1, t=60), "eval").shape == (1, 12)

    def test_wrong_frequency_extent_rejected(self):
        m = M.build_model(M.ModelConfig(tau=1))
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError):
            m.forward(T.Tensor(rng.normal(size=(1, 1, 32, 98)).astype(np.float32)), "eval")

    def test_eval_batch_invariance(self):
        m = M.build_model(M.ModelConfig(tau=1, seed=5))
        batch = features(n=4, t=98, seed=3)
        full = m.forward(batch, "eval").data
        for i in range(4):
            solo = m.forward(T.Tensor(batch.data[i:i + 1]), "eval").data
            np.testing.assert_allclose(solo[0], full[i], atol=1e-5)

    def test_eval_is_deterministic(self):
        m = M.build_model(M.ModelConfig(tau=1, seed=5))
        x = features(seed=7)
        assert m.forward(x, "eval").data.tobytes() == m.forward(x, "eval").data.tobytes()

    def test_zeroed_attention_gates_halve_stage_output(self):
        m = M.build_model(M.ModelConfig(tau=1, seed=8))
        for name, p in m.named_params():
            if ".att." in name:
                p.data[:] = 0.0
        x = features(n=2, seed=9)
        out = T.relu(m.stem_bn.forward(m.stem_conv.forward(x), "eval"))
        for blk in m.stages[0]:
            out = blk.forward(out, "eval")
        gated = m.attention[0].forward(out)
        np.testing.assert_allclose(gated.data, out.data * 0.5, rtol=1e-6)

    def test_gradient_reaches_every_parameter(self):
        # seed picked so the 2-unit gate MLPs start with live ReLUs; with
        # zero-bias init a minority of seeds begin with one gate saturated
        cfg = M.ModelConfig(tau=1, dropout=0.0, seed=0)
        m = M.build_model(cfg, dtype=np.float64)
        x = features(n=2, t=20, seed=1, dtype=np.float64)
        with T.record():
            out = m.forward(x, "train")
            loss = (out * out).sum()
        loss.backward()
        for name, p in m.named_params():
            assert p.grad is not None and np.any(p.grad != 0.0), name


class TestCheckpoint:
    def test_roundtrip_identical_logits(self, tmp_path):
        cfg = M.ModelConfig(tau=1, seed=13, labels=tuple(f"w{i}" for i in range(12)))
        m = M.build_model(cfg)
        x = features(seed=21)
        before = m.forward(x, "eval").data
        path = tmp_path / "model.bcse"
        M.save_checkpoint(m, path)
        loaded, optim = M.load_checkpoint(path)
        assert optim is None
        assert loaded.config == cfg
        after = loaded.forward(x, "eval").data
        assert before.tobytes() == after.tobytes()

    def test_tampered_byte_detected(self, tmp_path):
        m = M.build_model(M.ModelConfig(tau=1))
        path = tmp_path / "model.bcse"
        M.save_checkpoint(m, path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            M.load_checkpoint(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "junk.bcse"
        path.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(CheckpointError, match="magic"):
            M.load_checkpoint(path)

    def test_missing_tensor_named(self, tmp_path):
        m = M.build_model(M.ModelConfig(tau=1))
        original = m.named_params
        dropped = "head.fc.bias"
        m.named_params = lambda: ((n, p) for n, p in original() if n != dropped)
        path = tmp_path / "model.bcse"
        M.save_checkpoint(m, path)
        with pytest.raises(CheckpointError, match=dropped):
            M.load_checkpoint(path)

    def test_config_comes_from_the_file(self, tmp_path):
        m = M.build_model(M.ModelConfig(tau=1, num_classes=12))
        path = tmp_path / "model.bcse"
        M.save_checkpoint(m, path)
        loaded, _ = M.load_checkpoint(path)  # caller cannot impose tau=3
        assert loaded.config.tau == 1
        assert loaded.count_params() == m.count_params()

    def test_optimizer_state_roundtrip(self, tmp_path):
        m = M.build_model(M.ModelConfig(tau=1))
        slots = {f"m/{n}": np.full_like(p.data, 0.25) for n, p in m.named_params()}
        state = {"kind": "adam", "step": 17, "slots": slots}
        path = tmp_path / "model.bcse"
        M.save_checkpoint(m, path, optim_state=state)
        _, loaded = M.load_checkpoint(path)
        assert loaded["kind"] == "adam" and loaded["step"] == 17
        assert set(loaded["slots"]) == set(slots)
        np.testing.assert_array_equal(loaded["slots"]["m/head.fc.bias"],
                                      slots["m/head.fc.bias"])

    def test_running_stats_roundtrip(self, tmp_path):
        m = M.build_model(M.ModelConfig(tau=1, seed=2))
        # push the running stats away from their init
        m.forward(features(n=4, seed=3), "train", rng=0)
        path = tmp_path / "model.bcse"
        M.save_checkpoint(m, path)
        loaded, _ = M.load_checkpoint(path)
        np.testing.assert_array_equal(loaded.stem_bn.running_mean, m.stem_bn.running_mean)
        np.testing.assert_array_equal(loaded.stem_bn.running_var, m.stem_bn.running_var)
