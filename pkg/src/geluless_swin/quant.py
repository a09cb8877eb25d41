"""int8 SWIN inference with explicit fused-operation boundaries.

Each transformer block runs six int8 GEMMs (QKV, Q.K^T, att.V, Proj, FC1,
FC2).  Between them, float work is grouped into six fused ops that start with
a dequantize and end with a quantize::

    F1  layernorm -> shift/partition -> Q
    F2  dQ -> qkv bias -> Q (q, k, v)
    F3  dQ -> position bias (+ shift mask) -> softmax -> Q
    F4  dQ -> proj bias -> unpartition/unshift -> residual add -> layernorm -> Q
    F5  dQ -> fc1 bias -> GELU -> Q
    F6  dQ -> fc2 bias -> residual add

The residual stream stays float.  att.V feeds Proj directly in int8 through an
integer requantization.  In GELU-less mode F5 does not exist: FC1 accumulators
go through an integer ReLU and a fixed-point requantization straight into
FC2.

Patch embedding, patch merging and the classifier head stay float.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError, ShapeError
from .swin import (
    LN_EPS,
    Activation,
    SwinConfig,
    SwinModel,
    model_forward,
    patchify,
    merge_token_order,
    relative_position_bias,
    relative_position_index,
    shifted_window_attention_mask,
    window_token_order,
)

PROB_SCALE = 1.0 / T.QMAX

ACTIVATION_SITES = ("qkv_in", "q", "k", "v", "proj_in", "fc1_in", "fc2_in")
WEIGHT_NAMES = ("qkv", "proj", "fc1", "fc2")


class FusedOpId(enum.IntEnum):
    F1_LnShiftQ = 1
    F2_QkvBiasQ = 2
    F3_SoftmaxPosBias = 3
    F4_ProjBiasResidualQ = 4
    F5_Fc1BiasGelu = 5
    F6_Fc2BiasAddLn = 6


class Mode(str, enum.Enum):
    STANDARD = "standard"
    GELU_LESS = "gelu-less"


@dataclass
class CalibrationRecord:
    """Running max-abs per activation site (``"<block>.<site>"``)."""

    maxabs: dict = field(default_factory=dict)
    batches: int = 0

    def observe(self, site: str, value: np.ndarray):
        m = float(np.max(np.abs(value), initial=0.0))
        self.maxabs[site] = max(self.maxabs.get(site, 0.0), m)

    def scale(self, site: str) -> float:
        if site not in self.maxabs:
            raise ContractError(f"calibration record has no statistics for site '{site}'")
        return T.scale_from_maxabs(self.maxabs[site])

    def scales(self) -> dict:
        return {site: T.scale_from_maxabs(v) for site, v in self.maxabs.items()}


def calibrate_activations(model: SwinModel, batches: Iterable, record: Optional[CalibrationRecord] = None):
    """Run the float model over ``batches`` (image arrays) and record max-abs at every GEMM input."""
    record = record if record is not None else CalibrationRecord()
    seen = 0
    for images in batches:
        model_forward(model, images, probe=record.observe)
        seen += 1
    if seen == 0 and record.batches == 0:
        raise ParameterError("calibration set is empty")
    record.batches += seen
    return record


# --------------------------------------------------------------------------
# Trace instrumentation
# --------------------------------------------------------------------------


@dataclass
class OpTrace:
    """Ordered log of ``(block, event, dtype)``; events are Q, dQ, gemm:<name>, requant, fused:<id>."""

    events: list = field(default_factory=list)

    def add(self, block: str, event: str, array: Optional[np.ndarray] = None):
        self.events.append((block, event, None if array is None else array.dtype.name))

    def count(self, event: str, block: Optional[str] = None) -> int:
        return sum(1 for b, e, _ in self.events if e == event and (block is None or b == block))

    def between(self, block: str, start: str, stop: str) -> list:
        evs = [(e, d) for b, e, d in self.events if b == block]
        names = [e for e, _ in evs]
        return evs[names.index(start) + 1 : names.index(stop)]


class _NullTrace:
    def add(self, *args):
        pass


_NULL = _NullTrace()


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass
class QuantBlock:
    prefix: str
    dim: int
    heads: int
    window: int
    shift: int
    side: int
    activation: Activation
    weights: dict  # name -> QuantTensor (int8, [in, out])
    floats: dict  # layernorm params, biases, rel_pos_table
    act_scales: dict  # site -> scale

    def __post_init__(self):
        self.perm, self.inverse = window_token_order(self.side, self.window, self.shift)
        n = self.window * self.window
        bias = relative_position_bias(
            self.floats["rel_pos_table"], relative_position_index(self.window), self.heads
        )
        mask = shifted_window_attention_mask(self.side, self.side, self.window, self.shift)
        self.bias_mask = (bias[None] + mask[:, None]).astype(np.float32)  # [nW, heads, N, N]
        self.num_windows = mask.shape[0]
        self.tokens_per_window = n
        s = self.act_scales
        w = self.weights
        self.dq_qkv = np.float32(s["qkv_in"] * w["qkv"].scale)
        self.dq_qk = np.float32(s["q"] * s["k"])
        self.av_fold = PROB_SCALE * s["v"] / s["proj_in"]
        self.dq_proj = np.float32(s["proj_in"] * w["proj"].scale)
        self.dq_fc1 = np.float32(s["fc1_in"] * w["fc1"].scale)
        self.fc1_fold = s["fc1_in"] * w["fc1"].scale / s["fc2_in"]
        self.dq_fc2 = np.float32(s["fc2_in"] * w["fc2"].scale)
        self.attn_scale = np.float32((self.dim // self.heads) ** -0.5)


@dataclass
class QuantSwinModel:
    config: SwinConfig
    mode: Mode
    blocks: list
    floats: dict  # patch embed, merge weights, head (run in float)

    def block_prefixes(self) -> list:
        return [b.prefix for b in self.blocks]

    def predict(self, images, batch_size: int = 128) -> np.ndarray:
        images = np.asarray(images)
        out = [quant_model_forward(self, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)

    def int8_payload_bytes(self) -> int:
        return sum(q.data.nbytes for b in self.blocks for q in b.weights.values())


def _quantize_weight(w: np.ndarray) -> T.QuantTensor:
    return T.quantize(w, T.calibrate_scale([w]))


def quantize_model(model: SwinModel, record: CalibrationRecord, mode=Mode.STANDARD) -> QuantSwinModel:
    mode = Mode(mode)
    if mode is Mode.GELU_LESS:
        offenders = []
        for prefix in model.block_prefixes():
            if model.activations[prefix] != Activation.RELU:
                offenders.append(f"{prefix} uses GELU")
            elif np.any(model.params[f"{prefix}.fc1.bias"].value != 0):
                offenders.append(f"{prefix} has a non-zero FC1 bias")
        if offenders:
            raise ContractError(
                "gelu-less quantization needs a distilled model (all ReLU, zero FC1 bias): " + "; ".join(offenders)
            )
    blocks = []
    for blk in model.blocks():
        p = blk.prefix
        weights = {name: _quantize_weight(model.params[f"{p}.{name}.weight"].value) for name in WEIGHT_NAMES}
        floats = {
            name: model.params[f"{p}.{name}"].value.copy()
            for name in ("norm1.weight", "norm1.bias", "qkv.bias", "proj.bias", "rel_pos_table",
                         "norm2.weight", "norm2.bias", "fc2.bias")
        }
        if mode is Mode.STANDARD:
            floats["fc1.bias"] = model.params[f"{p}.fc1.bias"].value.copy()
        act_scales = {site: record.scale(f"{p}.{site}") for site in ACTIVATION_SITES}
        blocks.append(
            QuantBlock(p, blk.dim, blk.heads, blk.window, blk.shift, blk.side, blk.activation, weights, floats, act_scales)
        )
    floats = {
        k: v.value.copy()
        for k, v in model.params.items()
        if k.startswith(("patch_embed.", "head.")) or k.endswith(".merge.weight")
    }
    return QuantSwinModel(model.config, mode, blocks, floats)


def fused_op_inventory(qmodel: QuantSwinModel) -> list:
    ops = [op for op in FusedOpId if not (qmodel.mode is Mode.GELU_LESS and op is FusedOpId.F5_Fc1BiasGelu)]
    return [(b.prefix, op) for b in qmodel.blocks for op in ops]


# --------------------------------------------------------------------------
# Fused ops
# --------------------------------------------------------------------------


def _dq(acc: np.ndarray, factor) -> np.ndarray:
    return acc.astype(np.float32) * factor


def _ln(x, blk: QuantBlock, which: str) -> np.ndarray:
    return T.layernorm(x, blk.floats[f"{which}.weight"], blk.floats[f"{which}.bias"], LN_EPS)


class AblationCache:
    """Fused-op outputs captured from one real forward on a fixed batch.

    A removed op forwards its cached output buffer instead of computing it, so
    everything downstream sees the same data as in the baseline run and only
    the removed op's work disappears from the timing.
    """

    def __init__(self):
        self.outputs: dict = {}
        self.recording = False

    def prime(self, qmodel: "QuantSwinModel", images):
        self.recording = True
        try:
            quant_model_forward(qmodel, images, cache=self)
        finally:
            self.recording = False
        return self

    def get(self, prefix: str, op: "FusedOpId"):
        try:
            return self.outputs[(prefix, op)]
        except KeyError:
            raise ContractError(f"ablation cache holds no output for {prefix} {op.name}; prime it first") from None


def fused_f1(blk: QuantBlock, x: np.ndarray, tr) -> np.ndarray:
    b, length, c = x.shape
    h = _ln(x, blk, "norm1")
    h = h[:, blk.perm].reshape(b * blk.num_windows, blk.tokens_per_window, c)
    out = T.quantize_array(h, blk.act_scales["qkv_in"])
    tr.add(blk.prefix, "Q", out)
    return out


def fused_f2(blk: QuantBlock, acc: np.ndarray, tr):
    tr.add(blk.prefix, "dQ", acc)
    bw, n, _ = acc.shape
    heads, d = blk.heads, blk.dim // blk.heads
    f = _dq(acc, blk.dq_qkv) + blk.floats["qkv.bias"]
    f = f.reshape(bw, n, 3, heads, d).transpose(2, 0, 3, 1, 4)
    s = blk.act_scales
    q = T.quantize_array(f[0] * blk.attn_scale, s["q"])
    k_t = T.quantize_array(f[1].transpose(0, 1, 3, 2), s["k"])
    v = T.quantize_array(f[2], s["v"])
    for t in (q, k_t, v):
        tr.add(blk.prefix, "Q", t)
    return q, k_t, v


def fused_f3(blk: QuantBlock, acc: np.ndarray, tr) -> np.ndarray:
    tr.add(blk.prefix, "dQ", acc)
    bw, heads, n, _ = acc.shape
    nw = blk.num_windows
    f = _dq(acc, blk.dq_qk).reshape(bw // nw, nw, heads, n, n) + blk.bias_mask
    p = T.softmax_lastdim(f).reshape(bw, heads, n, n)
    out = T.quantize_array(p, PROB_SCALE)
    tr.add(blk.prefix, "Q", out)
    return out


def fused_f4(blk: QuantBlock, acc: np.ndarray, x: np.ndarray, tr):
    tr.add(blk.prefix, "dQ", acc)
    b, length, c = x.shape
    f = _dq(acc, blk.dq_proj) + blk.floats["proj.bias"]
    f = f.reshape(b, length, c)[:, blk.inverse]
    x = x + f
    h = T.quantize_array(_ln(x, blk, "norm2"), blk.act_scales["fc1_in"])
    tr.add(blk.prefix, "Q", h)
    return x, h


def fused_f5(blk: QuantBlock, acc: np.ndarray, tr) -> np.ndarray:
    tr.add(blk.prefix, "dQ", acc)
    f = _dq(acc, blk.dq_fc1) + blk.floats["fc1.bias"]
    f = T.gelu(f) if blk.activation == Activation.GELU else T.relu(f)
    out = T.quantize_array(f, blk.act_scales["fc2_in"])
    tr.add(blk.prefix, "Q", out)
    return out


def integer_relu_requant(blk: QuantBlock, acc: np.ndarray, tr) -> np.ndarray:
    """GELU-less FC1 epilogue: ReLU on int32 accumulators, then fixed-point requantization."""
    out = T.relu_requantize(acc, blk.fc1_fold)
    tr.add(blk.prefix, "relu_requant", out)
    return out


def fused_f6(blk: QuantBlock, acc: np.ndarray, x: np.ndarray, tr) -> np.ndarray:
    # The layernorm drawn next to this add is the next block's norm1, run in F1.
    tr.add(blk.prefix, "dQ", acc)
    return x + (_dq(acc, blk.dq_fc2) + blk.floats["fc2.bias"]).reshape(x.shape)


def _gemm(blk, name, a, b, tr):
    acc = T.matmul_int8_raw(a, b)
    tr.add(blk.prefix, f"gemm:{name}", acc)
    return acc


def quant_block_forward(
    blk: QuantBlock,
    x: np.ndarray,
    mode=Mode.STANDARD,
    trace: Optional[OpTrace] = None,
    disabled: frozenset = frozenset(),
    cache: Optional[AblationCache] = None,
) -> np.ndarray:
    """One quantized block on the float residual stream ``[B, L, C]``.

    Ops listed in ``disabled`` are skipped and replaced by their buffers from
    ``cache`` (timing ablation; the block's numeric output is then not a
    function of ``x``).
    """
    mode = Mode(mode)
    tr = trace if trace is not None else _NULL
    if x.ndim != 3 or x.shape[1] != blk.side * blk.side or x.shape[2] != blk.dim:
        raise ShapeError(f"{blk.prefix}: expected [B, {blk.side ** 2}, {blk.dim}], got {list(x.shape)}")
    if mode is Mode.GELU_LESS and "fc1.bias" in blk.floats:
        raise ContractError(f"{blk.prefix} was quantized in standard mode; cannot run gelu-less")
    if mode is Mode.STANDARD and "fc1.bias" not in blk.floats:
        raise ContractError(f"{blk.prefix} was quantized in gelu-less mode; cannot run standard")
    if disabled and cache is None:
        raise ContractError("disabling fused ops needs a primed AblationCache")
    b, length, c = x.shape
    nw, n = blk.num_windows, blk.tokens_per_window
    F = FusedOpId
    w = blk.weights
    recording = cache is not None and cache.recording

    def run(op, fn, *args):
        tr.add(blk.prefix, f"fused:{op.name}")
        if op in disabled:
            return cache.get(blk.prefix, op)
        out = fn(blk, *args, tr)
        if recording:
            cache.outputs[(blk.prefix, op)] = out
        return out

    h = run(F.F1_LnShiftQ, fused_f1, x)
    acc = _gemm(blk, "qkv", h, w["qkv"].data, tr)
    q, k_t, v = run(F.F2_QkvBiasQ, fused_f2, acc)
    acc = _gemm(blk, "qk", q, k_t, tr)
    p = run(F.F3_SoftmaxPosBias, fused_f3, acc)
    acc = _gemm(blk, "av", p, v, tr)
    a = T.requantize(acc, blk.av_fold)
    tr.add(blk.prefix, "requant", a)
    a = a.transpose(0, 2, 1, 3).reshape(b * nw, n, c)
    acc = _gemm(blk, "proj", a, w["proj"].data, tr)
    x, h = run(F.F4_ProjBiasResidualQ, fused_f4, acc, x)
    acc = _gemm(blk, "fc1", h, w["fc1"].data, tr)
    if mode is Mode.GELU_LESS:
        h = integer_relu_requant(blk, acc, tr)
    else:
        h = run(F.F5_Fc1BiasGelu, fused_f5, acc)
    acc = _gemm(blk, "fc2", h, w["fc2"].data, tr)
    return run(F.F6_Fc2BiasAddLn, fused_f6, acc, x)


def quant_model_forward(
    qmodel: QuantSwinModel,
    images,
    trace: Optional[OpTrace] = None,
    disabled: frozenset = frozenset(),
    cache: Optional[AblationCache] = None,
) -> np.ndarray:
    cfg = qmodel.config
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_chans):
        raise ShapeError(f"expected images [B, {cfg.image_size}, {cfg.image_size}, {cfg.in_chans}]")
    fl = qmodel.floats
    x = patchify(images, cfg.patch_size) @ fl["patch_embed.weight"] + fl["patch_embed.bias"]
    i = 0
    for s in range(cfg.num_stages):
        for _ in range(cfg.depths[s]):
            x = quant_block_forward(qmodel.blocks[i], x, qmodel.mode, trace, disabled, cache)
            i += 1
        if s + 1 < cfg.num_stages:
            side = cfg.stage_side(s)
            b, length, c = x.shape
            x = x[:, merge_token_order(side)].reshape(b, length // 4, 4 * c) @ fl[f"stage{s}.merge.weight"]
    x = T.layernorm(x, fl["head.norm.weight"], fl["head.norm.bias"], LN_EPS).mean(axis=1)
    return x @ fl["head.weight"] + fl["head.bias"]
