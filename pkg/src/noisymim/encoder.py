"""Patch embedding, pre-norm transformer blocks with affinity capture, the
learnable mask token, and the linear pixel head.

All ops accept either a single sequence [L, D] or a batch [N, L, D]; the
attention affinities then come out as [heads, L, L] or [N, heads, L, L].
Corruption is placed inside the encoder: θ-substitution happens at the
embedding layer and a noise hook fires once, on the output of block k
(k = 0 means before any block, i.e. pixel/embedding space).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as tz
from .corruption import MaskSpec, Rng, masked_row_matrix, STRATEGIES
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    """Architecture plus corruption-placement hyperparameters."""

    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 96
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    noise_block: int = 2
    strategy: str = "hybrid"
    mask_ratio: float = 0.6
    disruption_weight: float = 0.1
    denoise_weight: float = 1.0
    use_cls_token: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0 <= self.noise_block <= self.depth:
            raise ConfigError(f"noise_block {self.noise_block} outside [0, depth={self.depth}]")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy {self.strategy!r} not one of {STRATEGIES}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be in [0,1], got {self.mask_ratio}")
        if self.disruption_weight < 0 or self.denoise_weight < 0:
            raise ConfigError("loss weights must be nonnegative")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_image_tokens(self) -> int:
        return self.grid_size ** 2

    @property
    def seq_len(self) -> int:
        return self.num_image_tokens + (1 if self.use_cls_token else 0)

    @property
    def cls_offset(self) -> int:
        return 1 if self.use_cls_token else 0

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class AffinityRecord:
    """Post-softmax attention of one block: [.., heads, L, L]."""

    layer: int
    per_head: Tensor
    retained_for_grad: bool


# -- patch <-> token ------------------------------------------------------

def patchify(image, patch_size: int) -> Tensor:
    """[C,H,W] (or [N,C,H,W]) -> [L, C·p²] tokens in raster order.

    Row i is patch (i // gw, i % gw) flattened channel-major; exact inverse
    is :func:`unpatchify`.
    """
    t = tz.as_tensor(image)
    if t.ndim < 3:
        raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {t.shape}")
    c, h, w = t.shape[-3:]
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    lead = t.shape[:-3]
    n = len(lead)
    gh, gw = h // p, w // p
    t = tz.reshape(t, (*lead, c, gh, p, gw, p))
    t = tz.transpose(t, (*range(n), n + 1, n + 3, n, n + 2, n + 4))
    return tz.reshape(t, (*lead, gh * gw, c * p * p))


def unpatchify(tokens, channels: int, image_size: int, patch_size: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    t = tz.as_tensor(tokens)
    p = patch_size
    g = image_size // p
    lead = t.shape[:-2]
    n = len(lead)
    if t.shape[-2] != g * g or t.shape[-1] != channels * p * p:
        raise DimensionError(f"token array {t.shape} does not match image {channels}x{image_size}²/{p}")
    t = tz.reshape(t, (*lead, g, g, channels, p, p))
    t = tz.transpose(t, (*range(n), n + 2, n, n + 3, n + 1, n + 4))
    return tz.reshape(t, (*lead, channels, image_size, image_size))


# -- stem ------------------------------------------------------------------

def embed(patches, w_embed: Tensor, pos: Tensor, cls: Tensor | None = None) -> Tensor:
    """Bias-free linear projection plus learned positional table.

    When a CLS vector is given it is prepended at index 0; the positional
    table must then cover L = L_img + 1 rows.
    """
    x = tz.matmul(tz.as_tensor(patches), w_embed)
    if cls is not None:
        lead = x.shape[:-2]
        c = tz.broadcast_to(tz.reshape(cls, (1, cls.shape[0])), (*lead, 1, cls.shape[0]))
        x = tz.concat([c, x], axis=-2)
    if pos.shape[0] != x.shape[-2]:
        raise ConfigError(f"positional table has {pos.shape[0]} rows, sequence has {x.shape[-2]}")
    return x + pos


def apply_mask_tokens(features, mask, theta: Tensor, pos: Tensor, cls_offset: int = 0) -> Tensor:
    """Replace masked rows with θ and re-add their positional embedding.

    Visible rows (and the CLS slot) pass through untouched; masked tokens
    keep their location identity via the re-added position row.
    """
    features = tz.as_tensor(features)
    seq_len = features.shape[-2]
    num_img = seq_len - cls_offset
    rows = masked_row_matrix(mask, num_img)
    if rows.shape[-1] != num_img:
        raise ContractError(f"mask covers {rows.shape[-1]} tokens, embedding has {num_img} image tokens")
    full = np.zeros(rows.shape[:-1] + (seq_len,))
    full[..., cls_offset:] = rows
    m = full[..., None]
    replacement = theta + pos  # [L, D]; θ broadcasts across rows
    return features * (1.0 - m) + replacement * m


# -- attention ---------------------------------------------------------------

def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, seq, dim = t.shape
    n = len(lead)
    t = tz.reshape(t, (*lead, seq, heads, dim // heads))
    return tz.transpose(t, (*range(n), n + 1, n, n + 2))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, heads, seq, dh = t.shape
    n = len(lead)
    t = tz.transpose(t, (*range(n), n + 1, n, n + 2))
    return tz.reshape(t, (*lead, seq, heads * dh))


def attention(x, weights: Mapping[str, Tensor], head_count: int, layer: int = 0,
              record_grad: bool = True) -> tuple[Tensor, AffinityRecord]:
    """Multi-head self-attention with scale 1/√(D/heads).

    Returns the block output and an AffinityRecord holding the post-softmax
    matrix per head; the record stays on the gradient tape only when
    ``record_grad`` (i.e. when the disruption loss needs it).
    """
    x = tz.as_tensor(x)
    dim = x.shape[-1]
    if dim % head_count != 0:
        raise DimensionError(f"dim {dim} not divisible by {head_count} heads")
    q = tz.matmul(x, weights["wq"]) + weights["bq"]
    k = tz.matmul(x, weights["wk"]) + weights["bk"]
    v = tz.matmul(x, weights["wv"]) + weights["bv"]
    qh = _split_heads(q, head_count)
    kh = _split_heads(k, head_count)
    vh = _split_heads(v, head_count)
    n = qh.ndim
    scores = tz.matmul(qh, tz.transpose(kh, (*range(n - 2), n - 1, n - 2)))
    scores = scores * (1.0 / np.sqrt(dim // head_count))
    affinity = tz.softmax_rows(scores)
    ctx = tz.matmul(affinity, vh)
    out = tz.matmul(_merge_heads(ctx), weights["wo"]) + weights["bo"]
    recorded = affinity if record_grad else affinity.detach()
    record = AffinityRecord(layer=layer, per_head=recorded,
                            retained_for_grad=record_grad and affinity.requires_grad)
    return out, record


def _mlp(x: Tensor, weights: Mapping[str, Tensor]) -> Tensor:
    h = tz.gelu(tz.matmul(x, weights["w1"]) + weights["b1"])
    return tz.matmul(h, weights["w2"]) + weights["b2"]


def encoder_forward(corrupted_embedding, params: Mapping[str, Tensor], config: EncoderConfig,
                    feature_noise_hook: Callable[[Tensor], Tensor] | None = None,
                    record_grad: bool = True) -> tuple[Tensor, list[AffinityRecord]]:
    """Run the pre-norm block stack, firing the noise hook exactly once.

    Hook placement: k = 0 applies it to the input (pixel/embedding space),
    k > 0 to the residual output of block k.
    """
    x = tz.as_tensor(corrupted_embedding)
    calls = 0

    def run_hook(t: Tensor) -> Tensor:
        nonlocal calls
        calls += 1
        return feature_noise_hook(t) if feature_noise_hook is not None else t

    if config.noise_block == 0:
        x = run_hook(x)
    records: list[AffinityRecord] = []
    for i in range(config.depth):
        w = {key: params[f"block{i}.{key}"] for key in _BLOCK_KEYS}
        h = tz.layer_norm(x, w["ln1.gain"], w["ln1.bias"], eps=LN_EPS)
        attn_out, record = attention(h, {k[5:]: v for k, v in w.items() if k.startswith("attn.")},
                                     config.heads, layer=i, record_grad=record_grad)
        x = x + attn_out
        h2 = tz.layer_norm(x, w["ln2.gain"], w["ln2.bias"], eps=LN_EPS)
        x = x + _mlp(h2, {k[4:]: v for k, v in w.items() if k.startswith("mlp.")})
        records.append(record)
        if config.noise_block == i + 1:
            x = run_hook(x)
    if calls != 1:
        raise ContractError(f"feature noise hook invoked {calls} times, expected exactly 1")
    return x, records


def predict_pixels(features, w_head: Tensor, b_head: Tensor, cls_offset: int = 0) -> Tensor:
    """Shared linear map from features to flattened patch pixels; the CLS
    row, when present, is excluded."""
    features = tz.as_tensor(features)
    if cls_offset:
        axis = features.ndim - 2
        features = tz.narrow(features, axis, cls_offset, features.shape[-2] - cls_offset)
    return tz.matmul(features, w_head) + b_head


_BLOCK_KEYS = (
    "ln1.gain", "ln1.bias",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gain", "ln2.bias",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


def trunc_normal(rng: Rng, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std²) truncated at ±2 std, by resampling."""
    x = rng.normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class Encoder:
    """Parameter container plus the forward-pass plumbing.

    Parameters live in an insertion-ordered dict of named leaf tensors; that
    fixed order is what the optimizer and checkpoint code iterate over.
    """

    def __init__(self, config: EncoderConfig, rng: Rng):
        self.config = config
        self.params: dict[str, Tensor] = {}
        c = config

        def leaf(name: str, data: np.ndarray) -> None:
            self.params[name] = Tensor(data, requires_grad=True, name=name)

        leaf("embed.weight", trunc_normal(rng, (c.patch_dim, c.embed_dim)))
        leaf("pos", trunc_normal(rng, (c.seq_len, c.embed_dim)))
        if c.use_cls_token:
            leaf("cls", trunc_normal(rng, (c.embed_dim,)))
        leaf("theta", trunc_normal(rng, (c.embed_dim,)))
        hidden = int(round(c.embed_dim * c.mlp_ratio))
        for i in range(c.depth):
            leaf(f"block{i}.ln1.gain", np.ones(c.embed_dim))
            leaf(f"block{i}.ln1.bias", np.zeros(c.embed_dim))
            for w in ("wq", "wk", "wv", "wo"):
                leaf(f"block{i}.attn.{w}", trunc_normal(rng, (c.embed_dim, c.embed_dim)))
                leaf(f"block{i}.attn.{w.replace('w', 'b')}", np.zeros(c.embed_dim))
            leaf(f"block{i}.ln2.gain", np.ones(c.embed_dim))
            leaf(f"block{i}.ln2.bias", np.zeros(c.embed_dim))
            leaf(f"block{i}.mlp.w1", trunc_normal(rng, (c.embed_dim, hidden)))
            leaf(f"block{i}.mlp.b1", np.zeros(hidden))
            leaf(f"block{i}.mlp.w2", trunc_normal(rng, (hidden, c.embed_dim)))
            leaf(f"block{i}.mlp.b2", np.zeros(c.embed_dim))
        leaf("head.weight", trunc_normal(rng, (c.embed_dim, c.patch_dim)))
        leaf("head.bias", np.zeros(c.patch_dim))

    def leaves(self) -> list[Tensor]:
        return list(self.params.values())

    def embed_patches(self, patches) -> Tensor:
        cls = self.params.get("cls")
        return embed(patches, self.params["embed.weight"], self.params["pos"], cls)

    def mask_embedding(self, embedding, masks) -> Tensor:
        return apply_mask_tokens(embedding, masks, self.params["theta"], self.params["pos"],
                                 cls_offset=self.config.cls_offset)

    def forward(self, corrupted_embedding, hook=None, record_grad: bool = True):
        return encoder_forward(corrupted_embedding, self.params, self.config, hook,
                               record_grad=record_grad)

    def predict(self, features) -> Tensor:
        return predict_pixels(features, self.params["head.weight"], self.params["head.bias"],
                              cls_offset=self.config.cls_offset)

    def features_at(self, images, layer: int | None = None) -> np.ndarray:
        """Clean (uncorrupted) mean-pooled image-token features after `layer`
        blocks; used by the linear probe and the attention diagnostics."""
        c = self.config
        depth = c.depth if layer is None else layer
        if not 0 <= depth <= c.depth:
            raise ConfigError(f"feature layer {layer} outside [0, {c.depth}]")
        sub = dataclasses.replace(c, depth=depth, noise_block=min(c.noise_block, depth))
        with tz.no_grad():
            x = self.embed_patches(patchify(np.asarray(images), c.patch_size))
            x, _ = encoder_forward(x, self.params, sub, None, record_grad=False)
        toks = x.data[..., c.cls_offset:, :]
        return toks.mean(axis=-2)

    def clean_affinities(self, images) -> list[AffinityRecord]:
        """Affinity records of an uncorrupted forward pass (diagnostics)."""
        c = self.config
        with tz.no_grad():
            x = self.embed_patches(patchify(np.asarray(images), c.patch_size))
            _, records = encoder_forward(x, self.params, c, None, record_grad=False)
        return records
