"""Float SWIN transformer (teacher / reference model).

Tokens are carried as ``[B, L, C]`` with ``L = H * W`` in row-major spatial
order.  Shift + window partition are expressed as a single token permutation
so the same index arrays serve the float path, the autodiff tape and the
quantized pipeline.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ParameterError, ShapeError

MASK_VALUE = -100.0
LN_EPS = 1e-5


class Activation(enum.IntEnum):
    GELU = 0
    RELU = 1


@dataclass(frozen=True)
class SwinConfig:
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 32
    depths: tuple = (2, 2)
    num_heads: tuple = (2, 4)
    window_size: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        if len(self.depths) != len(self.num_heads) or not self.depths:
            raise ParameterError("depths and num_heads must be non-empty and of equal length")
        if self.image_size % self.patch_size:
            raise ParameterError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for i in range(len(self.depths)):
            side = self.stage_side(i)
            if side % self.window_size:
                raise ParameterError(f"stage {i} side {side} not divisible by window {self.window_size}")
            if self.stage_dim(i) % self.num_heads[i]:
                raise ParameterError(f"stage {i} dim {self.stage_dim(i)} not divisible by {self.num_heads[i]} heads")
            if i + 1 < len(self.depths) and side % 2:
                raise ParameterError(f"stage {i} side {side} must be even for patch merging")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def num_blocks(self) -> int:
        return sum(self.depths)

    def stage_side(self, i: int) -> int:
        return self.image_size // self.patch_size // (2**i)

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * (2**i)

    def shift_size(self, block: int) -> int:
        return 0 if block % 2 == 0 else self.window_size // 2

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "in_chans": self.in_chans,
            "embed_dim": self.embed_dim,
            "depths": list(self.depths),
            "num_heads": list(self.num_heads),
            "window_size": self.window_size,
            "mlp_ratio": self.mlp_ratio,
            "num_classes": self.num_classes,
        }


# --------------------------------------------------------------------------
# Window geometry
# --------------------------------------------------------------------------


def window_partition(x: np.ndarray, window: int) -> np.ndarray:
    """``[H, W, C] -> [nW, M*M, C]``; windows row-major, tokens row-major inside."""
    h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"window_partition: {h}x{w} not divisible by window {window}")
    x = x.reshape(h // window, window, w // window, window, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(-1, window * window, c)


def window_reverse(windows: np.ndarray, h: int, w: int) -> np.ndarray:
    nw, n, c = windows.shape
    window = int(round(n**0.5))
    if window * window != n or nw * n != h * w or h % window or w % window:
        raise ShapeError(f"window_reverse: {nw} windows of {n} tokens cannot tile {h}x{w}")
    x = windows.reshape(h // window, w // window, window, window, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def cyclic_shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[i][j] = x[(i + dy) % H][(j + dx) % W]``."""
    return np.roll(x, shift=(-dy, -dx), axis=(0, 1))


@lru_cache(maxsize=None)
def window_token_order(side: int, window: int, shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Token permutation realising shift-then-partition, and its inverse."""
    grid = np.arange(side * side).reshape(side, side, 1)
    perm = window_partition(cyclic_shift(grid, shift, shift), window).reshape(-1)
    inverse = np.argsort(perm)
    perm.setflags(write=False)
    inverse.setflags(write=False)
    return perm, inverse


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    """``[M*M, M*M]`` map from token pair to a row of the ``(2M-1)**2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    index = rel[0] * (2 * window - 1) + rel[1]
    index.setflags(write=False)
    return index


def relative_position_bias(table: np.ndarray, index_map: np.ndarray, heads: int) -> np.ndarray:
    """Gather ``bias[h, p, q] = table[index_map[p, q], h]``."""
    if table.ndim != 2 or table.shape[1] != heads:
        raise ShapeError(f"bias table must be [(2M-1)^2, {heads}], got {list(table.shape)}")
    if index_map.min() < 0 or index_map.max() >= table.shape[0]:
        raise ShapeError(f"index map references rows outside [0, {table.shape[0]})")
    return table[index_map].transpose(2, 0, 1)


@lru_cache(maxsize=None)
def _attention_mask_cached(h: int, w: int, window: int, shift: int) -> np.ndarray:
    img = np.zeros((h, w, 1))
    if shift > 0:
        cnt = 0
        spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
        for hs in spans:
            for ws in spans:
                img[hs, ws, :] = cnt
                cnt += 1
    ids = window_partition(img, window)[..., 0]
    diff = ids[:, :, None] != ids[:, None, :]
    mask = np.where(diff, MASK_VALUE, 0.0).astype(np.float32)
    mask.setflags(write=False)
    return mask


def shifted_window_attention_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """``[nW, M*M, M*M]`` additive mask: 0 within a pre-shift region, -100 across regions."""
    if not 0 <= shift < window:
        raise ParameterError(f"shift {shift} must be in [0, {window})")
    return _attention_mask_cached(h, w, window, shift)


@lru_cache(maxsize=None)
def merge_token_order(side: int) -> np.ndarray:
    """Token gather for 2x2 merging: per output token (top-left, bottom-left, top-right, bottom-right)."""
    grid = np.arange(side * side).reshape(side, side)
    parts = [grid[0::2, 0::2], grid[1::2, 0::2], grid[0::2, 1::2], grid[1::2, 1::2]]
    order = np.stack([p.reshape(-1) for p in parts], axis=1).reshape(-1)
    order.setflags(write=False)
    return order


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W, ch] -> [B, (H/p)*(W/p), p*p*ch]`` (patch-internal order: row, col, channel)."""
    b, h, w, ch = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, ch)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * ch)


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


BLOCK_COMPONENTS = (
    "norm1.weight",
    "norm1.bias",
    "qkv.weight",
    "qkv.bias",
    "proj.weight",
    "proj.bias",
    "rel_pos_table",
    "norm2.weight",
    "norm2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
)


@dataclass
class SwinBlock:
    prefix: str
    dim: int
    heads: int
    window: int
    shift: int
    side: int
    params: dict
    activation: Activation = Activation.GELU

    def __getitem__(self, component: str) -> Parameter:
        return self.params[f"{self.prefix}.{component}"]


@dataclass
class SwinModel:
    config: SwinConfig
    params: dict = field(default_factory=dict)
    activations: dict = field(default_factory=dict)  # block prefix -> Activation

    def block_prefixes(self) -> list[str]:
        """Blocks in architectural order (stage-major, depth-minor)."""
        return [f"stage{s}.block{j}" for s in range(self.config.num_stages) for j in range(self.config.depths[s])]

    def block(self, prefix: str) -> SwinBlock:
        s = int(prefix.split(".")[0][len("stage"):])
        j = int(prefix.split(".")[1][len("block"):])
        cfg = self.config
        return SwinBlock(
            prefix=prefix,
            dim=cfg.stage_dim(s),
            heads=cfg.num_heads[s],
            window=cfg.window_size,
            shift=cfg.shift_size(j),
            side=cfg.stage_side(s),
            params=self.params,
            activation=self.activations[prefix],
        )

    def blocks(self) -> list[SwinBlock]:
        return [self.block(p) for p in self.block_prefixes()]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def clone(self) -> "SwinModel":
        return SwinModel(
            self.config,
            {k: p.copy() for k, p in self.params.items()},
            dict(self.activations),
        )

    def astype(self, dtype) -> "SwinModel":
        return SwinModel(
            self.config,
            {k: p.copy(dtype) for k, p in self.params.items()},
            dict(self.activations),
        )

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def __deepcopy__(self, memo):
        return SwinModel(self.config, copy.deepcopy(self.params, memo), dict(self.activations))


def init_model(config: SwinConfig, seed: int = 0, activation: Activation = Activation.GELU) -> SwinModel:
    """Truncated-normal-ish init (std 0.02 linear weights, zero biases, unit norms)."""
    rng = np.random.default_rng(seed)

    def w(*shape, std=0.02):
        return Parameter(np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(np.float32))

    def zeros(*shape):
        return Parameter(np.zeros(shape, dtype=np.float32))

    def ones(*shape):
        return Parameter(np.ones(shape, dtype=np.float32))

    cfg = config
    p = {}
    in_dim = cfg.patch_size * cfg.patch_size * cfg.in_chans
    p["patch_embed.weight"] = w(in_dim, cfg.embed_dim, std=(1.0 / in_dim) ** 0.5)
    p["patch_embed.bias"] = zeros(cfg.embed_dim)
    activations = {}
    for s in range(cfg.num_stages):
        dim = cfg.stage_dim(s)
        heads = cfg.num_heads[s]
        hidden = dim * cfg.mlp_ratio
        m = cfg.window_size
        for j in range(cfg.depths[s]):
            pre = f"stage{s}.block{j}"
            p[f"{pre}.norm1.weight"] = ones(dim)
            p[f"{pre}.norm1.bias"] = zeros(dim)
            p[f"{pre}.qkv.weight"] = w(dim, 3 * dim)
            p[f"{pre}.qkv.bias"] = zeros(3 * dim)
            p[f"{pre}.proj.weight"] = w(dim, dim)
            p[f"{pre}.proj.bias"] = zeros(dim)
            p[f"{pre}.rel_pos_table"] = w((2 * m - 1) ** 2, heads)
            p[f"{pre}.norm2.weight"] = ones(dim)
            p[f"{pre}.norm2.bias"] = zeros(dim)
            p[f"{pre}.fc1.weight"] = w(dim, hidden)
            p[f"{pre}.fc1.bias"] = zeros(hidden)
            p[f"{pre}.fc2.weight"] = w(hidden, dim)
            p[f"{pre}.fc2.bias"] = zeros(dim)
            activations[pre] = Activation(activation)
        if s + 1 < cfg.num_stages:
            p[f"stage{s}.merge.weight"] = w(4 * dim, 2 * dim)
    final = cfg.stage_dim(cfg.num_stages - 1)
    p["head.norm.weight"] = ones(final)
    p["head.norm.bias"] = zeros(final)
    p["head.weight"] = w(final, cfg.num_classes)
    p["head.bias"] = zeros(cfg.num_classes)
    return SwinModel(cfg, p, activations)


Probe = Optional[Callable[[str, np.ndarray], None]]


def _p(params, name):
    return ad.param_var(params[name])


def attention_bias(block: SwinBlock, batch: int, dtype) -> np.ndarray:
    """Relative position bias plus shift mask, shaped for ``[B*nW, heads, N, N]`` logits (no grad)."""
    bias = relative_position_bias(block["rel_pos_table"].value, relative_position_index(block.window), block.heads)
    mask = shifted_window_attention_mask(block.side, block.side, block.window, block.shift)
    nw = mask.shape[0]
    full = bias[None, :, :, :] + mask[:, None, :, :]
    return np.broadcast_to(full[None], (batch, nw) + full.shape[1:]).reshape(batch * nw, *full.shape[1:]).astype(dtype)


def block_forward(block: SwinBlock, x, probe: Probe = None) -> ad.Var:
    """One SWIN block on ``[B, L, C]`` (or ``[L, C]``) tokens."""
    x = ad._wrap(x)
    squeeze = x.value.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.value.shape)
    b, length, c = x.value.shape
    if length != block.side * block.side or c != block.dim:
        raise ShapeError(f"{block.prefix}: expected [B, {block.side**2}, {block.dim}], got {list(x.value.shape)}")
    m, heads = block.window, block.heads
    n = m * m
    nw = length // n
    d = c // heads
    perm, inverse = window_token_order(block.side, m, block.shift)
    pp = block.params
    pre = block.prefix

    shortcut = x
    h = ad.layernorm(x, _p(pp, f"{pre}.norm1.weight"), _p(pp, f"{pre}.norm1.bias"), LN_EPS)
    h = ad.permute_tokens(h, perm, inverse)
    h = ad.reshape(h, (b * nw, n, c))
    if probe:
        probe(f"{pre}.qkv_in", h.value)
    qkv = ad.add(ad.matmul(h, _p(pp, f"{pre}.qkv.weight")), _p(pp, f"{pre}.qkv.bias"))
    qkv = ad.transpose(ad.reshape(qkv, (b * nw, n, 3, heads, d)), (2, 0, 3, 1, 4))
    q = ad.scale(ad.select(qkv, 0), d**-0.5)
    k = ad.select(qkv, 1)
    v = ad.select(qkv, 2)
    if probe:
        probe(f"{pre}.q", q.value)
        probe(f"{pre}.k", k.value)
        probe(f"{pre}.v", v.value)
    logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    table = _p(pp, f"{pre}.rel_pos_table")
    index = relative_position_index(m).reshape(-1)
    bias = ad.transpose(ad.reshape(ad.take(table, index, axis=0), (n, n, heads)), (2, 0, 1))
    logits = ad.add(logits, bias)
    if block.shift:
        mask = shifted_window_attention_mask(block.side, block.side, m, block.shift).astype(x.value.dtype)
        logits = ad.reshape(logits, (b, nw, heads, n, n))
        logits = ad.add(logits, mask[:, None, :, :])
        logits = ad.reshape(logits, (b * nw, heads, n, n))
    attn = ad.softmax(logits)
    o = ad.matmul(attn, v)
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b * nw, n, c))
    if probe:
        probe(f"{pre}.proj_in", o.value)
    o = ad.add(ad.matmul(o, _p(pp, f"{pre}.proj.weight")), _p(pp, f"{pre}.proj.bias"))
    o = ad.permute_tokens(ad.reshape(o, (b, length, c)), inverse, perm)
    x = ad.add(shortcut, o)

    h = ad.layernorm(x, _p(pp, f"{pre}.norm2.weight"), _p(pp, f"{pre}.norm2.bias"), LN_EPS)
    if probe:
        probe(f"{pre}.fc1_in", h.value)
    h = ad.add(ad.matmul(h, _p(pp, f"{pre}.fc1.weight")), _p(pp, f"{pre}.fc1.bias"))
    h = ad.gelu(h) if block.activation == Activation.GELU else ad.relu(h)
    if probe:
        probe(f"{pre}.fc2_in", h.value)
    h = ad.add(ad.matmul(h, _p(pp, f"{pre}.fc2.weight")), _p(pp, f"{pre}.fc2.bias"))
    x = ad.add(x, h)
    if squeeze:
        x = ad.reshape(x, x.value.shape[1:])
    return x


def patch_embed(model: SwinModel, images) -> ad.Var:
    cfg = model.config
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_chans):
        raise ShapeError(
            f"expected images [B, {cfg.image_size}, {cfg.image_size}, {cfg.in_chans}], got {list(images.shape)}"
        )
    dtype = model.params["patch_embed.weight"].value.dtype
    patches = patchify(images.astype(dtype, copy=False), cfg.patch_size)
    return ad.add(ad.matmul(patches, _p(model.params, "patch_embed.weight")), _p(model.params, "patch_embed.bias"))


def patch_merging(x, side: int, weight) -> ad.Var:
    """``[B, side*side, C] -> [B, side*side/4, 2C]`` via 2x2 gather and a bias-free 4C->2C projection."""
    x = ad._wrap(x)
    b, length, c = x.value.shape
    if side % 2 or length != side * side:
        raise ShapeError(f"patch merging needs an even square token grid, got {length} tokens for side {side}")
    order = merge_token_order(side)
    inverse = np.argsort(order)
    g = ad.permute_tokens(x, order, inverse)
    g = ad.reshape(g, (b, length // 4, 4 * c))
    return ad.matmul(g, weight)


def forward_features(model: SwinModel, images, probe: Probe = None, block_fn=None) -> ad.Var:
    """Patch embed and all stages; returns ``[B, L_last, C_last]`` tokens before the head."""
    block_fn = block_fn or block_forward
    cfg = model.config
    x = patch_embed(model, images)
    for s in range(cfg.num_stages):
        for j in range(cfg.depths[s]):
            x = block_fn(model.block(f"stage{s}.block{j}"), x, probe)
        if s + 1 < cfg.num_stages:
            x = patch_merging(x, cfg.stage_side(s), _p(model.params, f"stage{s}.merge.weight"))
    return x


def head_forward(model: SwinModel, x) -> ad.Var:
    x = ad.layernorm(x, _p(model.params, "head.norm.weight"), _p(model.params, "head.norm.bias"), LN_EPS)
    x = ad.mean_pool(x, axis=1)
    return ad.add(ad.matmul(x, _p(model.params, "head.weight")), _p(model.params, "head.bias"))


def model_forward_var(model: SwinModel, images, probe: Probe = None) -> ad.Var:
    return head_forward(model, forward_features(model, images, probe))


def model_forward(model: SwinModel, images, probe: Probe = None) -> np.ndarray:
    """Logits ``[B, num_classes]`` (no tape)."""
    return model_forward_var(model, images, probe).value


def predict(model: SwinModel, images, batch_size: int = 128) -> np.ndarray:
    images = np.asarray(images)
    out = [model_forward(model, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)
