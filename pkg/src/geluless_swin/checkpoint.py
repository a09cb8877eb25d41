"""Mapping between models / datasets / calibration records and SWQ1 tensor dicts."""

from __future__ import annotations

import numpy as np

from . import container
from .autodiff import Parameter
from .data import Dataset
from .errors import ContainerFormatError
from .quant import (
    ACTIVATION_SITES,
    WEIGHT_NAMES,
    CalibrationRecord,
    Mode,
    QuantBlock,
    QuantSwinModel,
)
from .swin import Activation, SwinConfig, SwinModel
from .tensor import QuantTensor

_MODE_CODES = {Mode.STANDARD: 0, Mode.GELU_LESS: 1}


def _config_tensors(cfg: SwinConfig) -> dict:
    return {f"config.{k}": np.asarray(v, dtype=np.int32) for k, v in cfg.to_dict().items()}


def _config_from(t: dict) -> SwinConfig:
    try:
        fields = {k[len("config."):]: v for k, v in t.items() if k.startswith("config.")}
        kw = {k: (tuple(int(x) for x in v) if v.ndim else int(v)) for k, v in fields.items()}
        return SwinConfig(**kw)
    except TypeError as exc:
        raise ContainerFormatError(f"checkpoint has an incomplete model config: {exc}") from None


def _require(t: dict, name: str) -> np.ndarray:
    if name not in t:
        raise ContainerFormatError(f"checkpoint is missing tensor '{name}'")
    return t[name]


def model_to_tensors(model: SwinModel) -> dict:
    out = _config_tensors(model.config)
    for name, p in model.params.items():
        out[name] = p.value
        if not p.trainable:
            out[f"{name}.frozen"] = np.asarray(1, dtype=np.int32)
    for prefix, act in model.activations.items():
        out[f"{prefix}.activation_kind"] = np.asarray(int(act), dtype=np.int32)
    return out


def model_from_tensors(t: dict) -> SwinModel:
    if "quant.mode" in t:
        raise ContainerFormatError("checkpoint holds a quantized model, expected a float model")
    cfg = _config_from(t)
    from .swin import init_model

    template = init_model(cfg)
    params = {}
    for name, tmpl in template.params.items():
        value = _require(t, name)
        if value.shape != tmpl.shape:
            raise ContainerFormatError(f"tensor '{name}' has shape {value.shape}, expected {tmpl.shape}")
        params[name] = Parameter(value.astype(np.float32), trainable=f"{name}.frozen" not in t)
    acts = {p: Activation(int(_require(t, f"{p}.activation_kind"))) for p in template.block_prefixes()}
    return SwinModel(cfg, params, acts)


def quant_model_to_tensors(q: QuantSwinModel) -> dict:
    out = _config_tensors(q.config)
    out["quant.mode"] = np.asarray(_MODE_CODES[q.mode], dtype=np.int32)
    for name, v in q.floats.items():
        out[name] = v
    for b in q.blocks:
        out[f"{b.prefix}.activation_kind"] = np.asarray(int(b.activation), dtype=np.int32)
        for name, w in b.weights.items():
            out[f"{b.prefix}.{name}.weight"] = w.data
            out[f"{b.prefix}.{name}.weight.scale"] = np.asarray(w.scale, dtype=np.float32)
        for name, v in b.floats.items():
            out[f"{b.prefix}.{name}"] = v
        for site, s in b.act_scales.items():
            out[f"{b.prefix}.act.{site}.scale"] = np.asarray(s, dtype=np.float32)
    return out


def quant_model_from_tensors(t: dict) -> QuantSwinModel:
    cfg = _config_from(t)
    mode = {v: k for k, v in _MODE_CODES.items()}[int(_require(t, "quant.mode"))]
    from .swin import init_model

    template = init_model(cfg)
    blocks = []
    for blk in template.blocks():
        p = blk.prefix
        weights = {
            name: QuantTensor(_require(t, f"{p}.{name}.weight"), float(_require(t, f"{p}.{name}.weight.scale")))
            for name in WEIGHT_NAMES
        }
        float_names = ["norm1.weight", "norm1.bias", "qkv.bias", "proj.bias", "rel_pos_table",
                       "norm2.weight", "norm2.bias", "fc2.bias"]
        if mode is Mode.STANDARD:
            float_names.append("fc1.bias")
        floats = {name: _require(t, f"{p}.{name}") for name in float_names}
        scales = {site: float(_require(t, f"{p}.act.{site}.scale")) for site in ACTIVATION_SITES}
        act = Activation(int(_require(t, f"{p}.activation_kind")))
        blocks.append(QuantBlock(p, blk.dim, blk.heads, blk.window, blk.shift, blk.side, act, weights, floats, scales))
    floats = {
        k: _require(t, k)
        for k in template.params
        if k.startswith(("patch_embed.", "head.")) or k.endswith(".merge.weight")
    }
    return QuantSwinModel(cfg, mode, blocks, floats)


def record_to_tensors(record: CalibrationRecord) -> dict:
    out = {f"{site}.maxabs": np.asarray(v, dtype=np.float32) for site, v in record.maxabs.items()}
    out["calib.batches"] = np.asarray(record.batches, dtype=np.int32)
    return out


def record_from_tensors(t: dict) -> CalibrationRecord:
    maxabs = {k[: -len(".maxabs")]: float(v) for k, v in t.items() if k.endswith(".maxabs")}
    return CalibrationRecord(maxabs, int(t.get("calib.batches", 0)))


def dataset_to_tensors(ds: Dataset) -> dict:
    return {"images": ds.images.astype(np.float32), "labels": ds.labels.astype(np.int32)}


def dataset_from_tensors(t: dict) -> Dataset:
    return Dataset(_require(t, "images"), _require(t, "labels"))


def save_model(path, model):
    tensors = quant_model_to_tensors(model) if isinstance(model, QuantSwinModel) else model_to_tensors(model)
    container.save(path, tensors)


def load_any_model(path):
    t = container.load(path)
    return quant_model_from_tensors(t) if "quant.mode" in t else model_from_tensors(t)
