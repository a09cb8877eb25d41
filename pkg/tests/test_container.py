import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from geluless_swin import checkpoint, container
from geluless_swin.errors import ContainerFormatError
from geluless_swin.distill import naive_swap
from geluless_swin.quant import Mode, calibrate_activations, quant_model_forward, quantize_model
from geluless_swin.swin import model_forward


def test_byte_layout():
    raw = container.dumps({"w": np.array([[1, -2]], dtype=np.int8)})
    want = b"SWQ1" + struct.pack("<I", 1) + struct.pack("<H", 1) + b"w" + bytes([1, 2])
    want += struct.pack("<2Q", 1, 2) + bytes([1, 0xFE])
    assert raw == want


def test_dtype_codes_and_promotion():
    t = container.loads(container.dumps({
        "f": np.zeros(2, np.float64), "i": np.zeros(2, np.int64), "b": np.array(True), "s": np.float32(3.5),
    }))
    assert t["f"].dtype == np.float32 and t["i"].dtype == np.int32 and t["b"].dtype == np.int32
    assert t["s"].shape == () and t["s"] == 3.5


def test_unsupported_dtype():
    with pytest.raises(ContainerFormatError):
        container.dumps({"c": np.zeros(2, np.complex64)})


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b[:6], "truncated"),
    ],
)
def test_corrupt(mutate, match):
    raw = container.dumps({"a": np.arange(4, dtype=np.int32)})
    with pytest.raises(ContainerFormatError, match=match):
        container.loads(mutate(raw))


def test_duplicate_names():
    one = container.dumps({"a": np.zeros(1, np.int8)})
    entry = one[8:]
    raw = b"SWQ1" + struct.pack("<I", 2) + entry + entry
    with pytest.raises(ContainerFormatError, match="duplicate"):
        container.loads(raw)


def test_unknown_code():
    raw = bytearray(container.dumps({"a": np.zeros(1, np.int8)}))
    raw[4 + 4 + 2 + 1] = 9
    with pytest.raises(ContainerFormatError, match="dtype code"):
        container.loads(bytes(raw))


def test_corrupt_file_is_an_oserror(tmp_path):
    path = tmp_path / "x.swq"
    path.write_bytes(b"SWQ")
    with pytest.raises(OSError):
        container.load(path)


arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(width=32)),
    hnp.arrays(np.int8, hnp.array_shapes(min_dims=0, max_dims=3, max_side=6)),
    hnp.arrays(np.int32, hnp.array_shapes(min_dims=1, max_dims=2, max_side=6)),
)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), arrays, max_size=5))
def test_round_trip(tensors):
    back = container.loads(container.dumps(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_save_is_atomic_and_deterministic(tmp_path):
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}
    container.save(tmp_path / "a.swq", t)
    container.save(tmp_path / "b.swq", t)
    assert (tmp_path / "a.swq").read_bytes() == (tmp_path / "b.swq").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


class TestCheckpoints:
    def test_float_model_round_trip(self, small_model, tmp_path, rng):
        small_model.params["stage0.block0.fc1.bias"].trainable = False
        checkpoint.save_model(tmp_path / "m.swq", small_model)
        back = checkpoint.load_any_model(tmp_path / "m.swq")
        assert back.config == small_model.config
        assert back.activations == small_model.activations
        assert not back.params["stage0.block0.fc1.bias"].trainable
        imgs = rng.uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
        np.testing.assert_array_equal(model_forward(back, imgs), model_forward(small_model, imgs))

    @pytest.mark.parametrize("mode", list(Mode))
    def test_quant_model_round_trip(self, small_model, tmp_path, rng, mode):
        model = naive_swap(small_model)
        imgs = rng.uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
        q = quantize_model(model, calibrate_activations(model, [imgs]), mode)
        checkpoint.save_model(tmp_path / "q.swq", q)
        raw = container.load(tmp_path / "q.swq")
        assert raw["stage0.block0.qkv.weight"].dtype == np.int8
        assert raw["stage0.block0.qkv.weight.scale"].shape == ()
        back = checkpoint.load_any_model(tmp_path / "q.swq")
        assert back.mode is mode
        np.testing.assert_array_equal(quant_model_forward(back, imgs), quant_model_forward(q, imgs))

    def test_record_round_trip(self, small_model, rng):
        rec = calibrate_activations(small_model, [rng.uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)])
        back = checkpoint.record_from_tensors(container.loads(container.dumps(checkpoint.record_to_tensors(rec))))
        assert back.scales() == pytest.approx(rec.scales(), rel=1e-6)
        assert back.batches == rec.batches

    def test_missing_tensor(self, small_model):
        t = checkpoint.model_to_tensors(small_model)
        del t["head.weight"]
        with pytest.raises(ContainerFormatError):
            checkpoint.model_from_tensors(t)

    def test_quantized_is_not_float(self, small_model, rng):
        imgs = rng.uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
        q = quantize_model(small_model, calibrate_activations(small_model, [imgs]))
        with pytest.raises(ContainerFormatError):
            checkpoint.model_from_tensors(checkpoint.quant_model_to_tensors(q))

    def test_stream_io(self):
        buf = io.BytesIO()
        container.write(buf, {"x": np.ones(3, np.int32)})
        buf.seek(0)
        assert container.read(buf)["x"].tolist() == [1, 1, 1]
