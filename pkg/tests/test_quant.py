import numpy as np
import pytest

from geluless_swin import tensor as T
from geluless_swin.distill import naive_swap
from geluless_swin.errors import ContractError, ParameterError, ShapeError
from geluless_swin.quant import (
    ACTIVATION_SITES,
    FusedOpId,
    Mode,
    OpTrace,
    AblationCache,
    CalibrationRecord,
    calibrate_activations,
    fused_f3,
    fused_op_inventory,
    integer_relu_requant,
    quant_block_forward,
    quant_model_forward,
    quantize_model,
)
from geluless_swin.swin import SwinConfig, block_forward, init_model, model_forward


def _images(rng, cfg, n):
    return rng.uniform(0, 1, (n, cfg.image_size, cfg.image_size, cfg.in_chans)).astype(np.float32)


@pytest.fixture(scope="module")
def toy():
    """Untrained default-config model (4 blocks) with its ReLU twin, both calibrated."""
    cfg = SwinConfig()
    rng = np.random.default_rng(7)
    gelu_model = init_model(cfg, seed=2)
    relu_model = naive_swap(gelu_model)
    calib = [_images(rng, cfg, 32) for _ in range(2)]
    return {
        "cfg": cfg,
        "gelu": gelu_model,
        "relu": relu_model,
        "rec_gelu": calibrate_activations(gelu_model, calib),
        "rec_relu": calibrate_activations(relu_model, calib),
        "images": _images(rng, cfg, 8),
    }


class TestCalibration:
    def test_all_zero_batch_gives_unit_scales(self, small_model):
        cfg = small_model.config
        for p in small_model.params.values():
            p.value = np.zeros_like(p.value)
        rec = calibrate_activations(small_model, [np.zeros((2, cfg.image_size, cfg.image_size, 3), np.float32)])
        assert rec.scales() and set(rec.scales().values()) == {1.0}

    def test_empty(self, small_model):
        with pytest.raises(ParameterError):
            calibrate_activations(small_model, [])

    def test_covers_every_site(self, toy):
        for prefix in toy["gelu"].block_prefixes():
            for site in ACTIVATION_SITES:
                assert toy["rec_gelu"].scale(f"{prefix}.{site}") > 0

    def test_fc1_input_maxabs_matches_instrumented_forward(self, small_model, rng):
        cfg = small_model.config
        batches = [_images(rng, cfg, 4) for _ in range(3)]
        seen = []
        for b in batches:
            model_forward(small_model, b, probe=lambda site, v: seen.append(v.copy()) if site.endswith("block0.fc1_in") else None)
        brute = max(float(abs(v).max()) for v in seen)
        rec = calibrate_activations(small_model, batches)
        assert rec.maxabs["stage0.block0.fc1_in"] == brute
        assert rec.batches == 3

    def test_missing_site(self):
        with pytest.raises(ContractError):
            CalibrationRecord().scale("stage0.block0.q")


class TestQuantizeModel:
    def test_weight_round_trip(self, toy):
        q = quantize_model(toy["gelu"], toy["rec_gelu"])
        for blk in q.blocks:
            for name, qt in blk.weights.items():
                w = toy["gelu"].params[f"{blk.prefix}.{name}.weight"].value
                assert np.abs(w - T.dequantize(qt)).max() <= qt.scale / 2 * (1 + 1e-6)

    def test_geluless_needs_distilled_model(self, toy):
        with pytest.raises(ContractError, match="GELU"):
            quantize_model(toy["gelu"], toy["rec_gelu"], Mode.GELU_LESS)

    def test_geluless_rejects_fc1_bias(self, toy):
        biased = toy["relu"].clone()
        biased.params["stage1.block1.fc1.bias"].value[3] = 0.1
        with pytest.raises(ContractError, match="bias"):
            quantize_model(biased, toy["rec_relu"], "gelu-less")

    def test_payload_is_a_quarter(self, toy):
        q = quantize_model(toy["gelu"], toy["rec_gelu"])
        float_bytes = sum(toy["gelu"].params[f"{b.prefix}.{n}.weight"].value.nbytes for b in q.blocks for n in b.weights)
        assert q.int8_payload_bytes() * 4 == float_bytes

    def test_inventory(self, toy):
        std = fused_op_inventory(quantize_model(toy["relu"], toy["rec_relu"], Mode.STANDARD))
        gl = fused_op_inventory(quantize_model(toy["relu"], toy["rec_relu"], Mode.GELU_LESS))
        assert len(std) == 24
        assert len(gl) == 20
        assert all(op is not FusedOpId.F5_Fc1BiasGelu for _, op in gl)
        assert set(std) - set(gl) == {(p, FusedOpId.F5_Fc1BiasGelu) for p in toy["relu"].block_prefixes()}


@pytest.fixture(scope="module")
def traces(toy):
    out = {}
    for mode in Mode:
        tr = OpTrace()
        quant_model_forward(quantize_model(toy["relu"], toy["rec_relu"], mode), toy["images"][:2], trace=tr)
        out[mode] = tr
    return out


class TestTrace:
    def test_one_fewer_q_and_dq_per_block(self, toy, traces):
        std, gl = traces[Mode.STANDARD], traces[Mode.GELU_LESS]
        for prefix in toy["relu"].block_prefixes():
            assert std.count("Q", prefix) - gl.count("Q", prefix) == 1
            assert std.count("dQ", prefix) - gl.count("dQ", prefix) == 1
            assert std.count("fused:F5_Fc1BiasGelu", prefix) == 1
            assert gl.count("fused:F5_Fc1BiasGelu", prefix) == 0

    def test_no_float_between_fc1_and_fc2(self, toy, traces):
        for prefix in toy["relu"].block_prefixes():
            between = traces[Mode.GELU_LESS].between(prefix, "gemm:fc1", "gemm:fc2")
            assert between == [("relu_requant", "int8")]
            std_between = [e for e, _ in traces[Mode.STANDARD].between(prefix, "gemm:fc1", "gemm:fc2")]
            assert "dQ" in std_between and "Q" in std_between

    def test_gemms_accumulate_in_int32(self, traces):
        gemms = [d for _, e, d in traces[Mode.GELU_LESS].events if e.startswith("gemm:")]
        assert len(gemms) == 24 and set(gemms) == {"int32"}

    def test_standard_order_matches_block_diagram(self, traces):
        order = [e for b, e, _ in traces[Mode.STANDARD].events if b == "stage0.block0" and e.startswith(("gemm", "fused"))]
        assert order == [
            "fused:F1_LnShiftQ", "gemm:qkv", "fused:F2_QkvBiasQ", "gemm:qk", "fused:F3_SoftmaxPosBias", "gemm:av",
            "gemm:proj", "fused:F4_ProjBiasResidualQ", "gemm:fc1", "fused:F5_Fc1BiasGelu", "gemm:fc2",
            "fused:F6_Fc2BiasAddLn",
        ]


class TestBlockFidelity:
    def test_integer_relu_requant_within_one_ulp(self, toy, rng):
        blk = quantize_model(toy["relu"], toy["rec_relu"], Mode.GELU_LESS).blocks[0]
        acc = rng.integers(-(2**17), 2**17, (4, 64, 128)).astype(np.int32)
        got = integer_relu_requant(blk, acc, OpTrace()).astype(np.int64)
        float_side = T.relu(acc.astype(np.float64) * blk.dq_fc1)
        want = np.clip(T.round_half_away(float_side / blk.act_scales["fc2_in"]), -127, 127)
        assert np.abs(got - want).max() <= 1

    def test_softmax_op_identical_across_modes(self, toy, rng):
        std = quantize_model(toy["relu"], toy["rec_relu"], Mode.STANDARD).blocks[1]
        gl = quantize_model(toy["relu"], toy["rec_relu"], Mode.GELU_LESS).blocks[1]
        acc = rng.integers(-5000, 5000, (4 * std.num_windows, std.heads, 16, 16)).astype(np.int32)
        a, b = fused_f3(std, acc, OpTrace()), fused_f3(gl, acc, OpTrace())
        assert a.tobytes() == b.tobytes()

    def test_softmax_outputs_identical_in_full_forward(self, toy):
        caches = {m: AblationCache().prime(quantize_model(toy["relu"], toy["rec_relu"], m), toy["images"][:2]) for m in Mode}
        key = ("stage0.block0", FusedOpId.F3_SoftmaxPosBias)
        assert caches[Mode.STANDARD].outputs[key].tobytes() == caches[Mode.GELU_LESS].outputs[key].tobytes()

    def test_standard_block_tracks_float_block(self, toy, rng):
        q = quantize_model(toy["gelu"], toy["rec_gelu"], Mode.STANDARD)
        agree = 0
        for _ in range(100):
            x = rng.standard_normal((1, 64, 32)).astype(np.float32)
            f = block_forward(toy["gelu"].block("stage0.block0"), x).value
            g = quant_block_forward(q.blocks[0], x, Mode.STANDARD)
            agree += int(np.mean(f.argmax(-1) == g.argmax(-1)) >= 0.95)
        assert agree >= 95

    def test_zero_input_zero_mixing_stays_zero(self, toy):
        q = quantize_model(toy["gelu"], toy["rec_gelu"], Mode.STANDARD)
        blk = q.blocks[0]
        for name in ("proj.bias", "fc2.bias"):
            blk.floats[name] = np.zeros_like(blk.floats[name])
        out = quant_block_forward(blk, np.zeros((1, 64, 32), np.float32), Mode.STANDARD)
        np.testing.assert_array_equal(out, 0)

    def test_mode_mismatch(self, toy):
        std = quantize_model(toy["relu"], toy["rec_relu"], Mode.STANDARD).blocks[0]
        gl = quantize_model(toy["relu"], toy["rec_relu"], Mode.GELU_LESS).blocks[0]
        x = np.zeros((1, 64, 32), np.float32)
        with pytest.raises(ContractError):
            quant_block_forward(std, x, Mode.GELU_LESS)
        with pytest.raises(ContractError):
            quant_block_forward(gl, x, Mode.STANDARD)

    def test_shape_mismatch(self, toy):
        blk = quantize_model(toy["gelu"], toy["rec_gelu"]).blocks[0]
        with pytest.raises(ShapeError):
            quant_block_forward(blk, np.zeros((1, 60, 32), np.float32))


class TestAblationCache:
    def test_disable_without_cache(self, toy):
        q = quantize_model(toy["gelu"], toy["rec_gelu"])
        with pytest.raises(ContractError):
            quant_model_forward(q, toy["images"][:1], disabled=frozenset({FusedOpId.F5_Fc1BiasGelu}))

    def test_removed_ops_forward_real_buffers(self, toy):
        q = quantize_model(toy["gelu"], toy["rec_gelu"])
        batch = toy["images"][:2]
        cache = AblationCache().prime(q, batch)
        baseline = quant_model_forward(q, batch)
        for op in FusedOpId:
            np.testing.assert_array_equal(quant_model_forward(q, batch, disabled=frozenset({op}), cache=cache), baseline)

    def test_unprimed_cache(self, toy):
        q = quantize_model(toy["gelu"], toy["rec_gelu"])
        with pytest.raises(ContractError, match="prime"):
            quant_model_forward(q, toy["images"][:1], disabled=frozenset({FusedOpId.F1_LnShiftQ}), cache=AblationCache())


def test_standard_model_logits_track_float(toy, rng):
    q = quantize_model(toy["gelu"], toy["rec_gelu"])
    imgs = _images(rng, toy["cfg"], 16)
    f, g = model_forward(toy["gelu"], imgs), q.predict(imgs)
    assert np.abs(f - g).max() < 0.05 * np.abs(f).max() + 1e-3
