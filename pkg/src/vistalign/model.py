"""Toy encoder-MLP-LLM multimodal model.

Image features (already produced by a frozen "vision encoder", see
:mod:`vistalign.training`) pass through a two-layer projector into the token
embedding space, are prefixed to the text embeddings, and the whole sequence
runs through pre-norm causal transformer blocks.  Image positions see each
other; text position ``t`` sees the full image prefix and text positions up to
``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tc
from .tensor import DimensionError, Tensor

MLP_RATIO = 4
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    n_image_tokens: int = 8
    max_text_len: int = 16
    d_image_feat: int = 16
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise TypeError(f"{f.name} must be an integer")
            if f.name == "seed":
                if not 0 <= v < 2**64:
                    raise ValueError("seed must fit in an unsigned 64-bit integer")
            elif v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class MultimodalBatch:
    image_features: np.ndarray  # (batch, n, d_image_feat)
    text_ids: np.ndarray  # (batch, m) int
    loss_mask: np.ndarray  # (batch, m) bool

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        self.text_ids = np.asarray(self.text_ids, dtype=np.int64)
        if self.loss_mask is None:
            self.loss_mask = np.ones(self.text_ids.shape, dtype=bool)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.loss_mask.shape != self.text_ids.shape:
            raise DimensionError("loss_mask and text_ids shapes differ")
        if self.image_features.ndim != 3 or self.text_ids.ndim != 2:
            raise DimensionError("expected image_features (B,n,F) and text_ids (B,m)")
        if self.image_features.shape[0] != self.text_ids.shape[0]:
            raise DimensionError("batch extents differ")

    @property
    def size(self) -> int:
        return self.text_ids.shape[0]

    def rows(self, idx) -> MultimodalBatch:
        return MultimodalBatch(self.image_features[idx], self.text_ids[idx], self.loss_mask[idx])


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, m, V); row t predicts text token t from image prefix + tokens < t
    image_hidden: Tensor  # (B, n, d), last layer after the final norm
    image_summary: Tensor  # (B, d), image_hidden[:, n-1]
    text_embeddings: Tensor  # (B, m, d), embedding-table output
    text_hidden: Tensor  # (B, m, d), last layer after the final norm

    def text_repr(self, source: str = "embedding") -> Tensor:
        if source == "embedding":
            return self.text_embeddings
        if source == "hidden":
            return self.text_hidden
        raise ValueError(f"unknown text representation {source!r}")


Params = dict[str, Tensor]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, h = cfg.d_model, cfg.d_image_feat, MLP_RATIO * cfg.d_model
    shapes = {
        "proj.w1": (f, d),
        "proj.b1": (d,),
        "proj.w2": (d, d),
        "proj.b2": (d,),
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.n_image_tokens + cfg.max_text_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, h), p + "mlp.b1": (h,),
            p + "mlp.w2": (h, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, cfg.vocab_size)})
    return shapes


def init_params(cfg: ModelConfig) -> Params:
    """Seeded initialization; identical config gives bitwise identical params."""
    rng = np.random.default_rng(cfg.seed)
    resid_scale = 1.0 / math.sqrt(2 * cfg.n_layers)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        elif name == "tok_emb":
            data = rng.normal(0.0, 1.0, shape)
        elif name == "pos_emb":
            data = rng.normal(0.0, 0.1, shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
            if name.endswith(("attn.wo", "mlp.w2")):
                data *= resid_scale
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def build_causal_mask(n: int, m: int) -> np.ndarray:
    """(n+m)x(n+m) attention mask: True where query row may attend key column."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    size = n + m
    mask = np.tril(np.ones((size, size), dtype=bool))
    mask[:n, :n] = True
    return mask


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tc.matmul(x, w)
    return tc.add_bias(y, b) if b is not None else y


def project_image(features, params: Params, activation: bool = True) -> Tensor:
    """Two-layer connector from image-feature space to d_model."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    w1 = params["proj.w1"]
    if x.ndim < 2 or x.shape[-1] != w1.shape[0]:
        raise DimensionError(f"image features last extent {x.shape[-1]} != {w1.shape[0]}")
    h = _linear(x, w1, params["proj.b1"])
    if activation:
        h = tc.gelu(h)
    return _linear(h, params["proj.w2"], params["proj.b2"])


def _attention(x: Tensor, params: Params, prefix: str, cfg: ModelConfig, mask: np.ndarray) -> Tensor:
    B, L, d = x.shape
    H, hd = cfg.n_heads, cfg.head_dim

    def heads(w):
        y = tc.reshape(tc.matmul(x, params[prefix + w]), (B, L, H, hd))
        return tc.transpose(y, (0, 2, 1, 3))

    q, k, v = heads("attn.wq"), heads("attn.wk"), heads("attn.wv")
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    att = tc.softmax(scores, mask)
    out = tc.transpose(tc.matmul(att, v), (0, 2, 1, 3))
    return tc.matmul(tc.reshape(out, (B, L, d)), params[prefix + "attn.wo"])


def _block(x: Tensor, params: Params, i: int, cfg: ModelConfig, mask: np.ndarray) -> Tensor:
    p = f"blocks.{i}."
    h = tc.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], LN_EPS)
    x = x + _attention(h, params, p, cfg, mask)
    h = tc.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)
    h = tc.gelu(_linear(h, params[p + "mlp.w1"], params[p + "mlp.b1"]))
    return x + _linear(h, params[p + "mlp.w2"], params[p + "mlp.b2"])


def check_batch(batch: MultimodalBatch, cfg: ModelConfig) -> None:
    _, n, f = batch.image_features.shape
    m = batch.text_ids.shape[1]
    if n != cfg.n_image_tokens or f != cfg.d_image_feat:
        raise DimensionError(
            f"image features {batch.image_features.shape[1:]} != ({cfg.n_image_tokens}, {cfg.d_image_feat})"
        )
    if m > cfg.max_text_len:
        raise ValueError(f"text length {m} exceeds max_text_len={cfg.max_text_len}")
    if batch.text_ids.size and (batch.text_ids.min() < 0 or batch.text_ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")


def forward(params: Params, cfg: ModelConfig, batch: MultimodalBatch) -> ForwardOutput:
    check_batch(batch, cfg)
    n = cfg.n_image_tokens
    B, m = batch.text_ids.shape
    img = project_image(batch.image_features, params)
    txt = tc.embedding_gather(params["tok_emb"], batch.text_ids)
    x = tc.concat([img, txt], axis=1)
    x = tc.add_bias(x, tc.slice_axis(params["pos_emb"], 0, 0, n + m))
    mask = build_causal_mask(n, m)
    for i in range(cfg.n_layers):
        x = _block(x, params, i, cfg, mask)
    h = tc.layer_norm(x, params["ln_f.g"], params["ln_f.b"], LN_EPS)
    image_hidden = tc.slice_axis(h, 1, 0, n)
    summary = tc.reshape(tc.slice_axis(h, 1, n - 1, n), (B, cfg.d_model))
    logits = tc.matmul(tc.slice_axis(h, 1, n - 1, n + m - 1), params["head.w"])
    return ForwardOutput(
        logits=logits,
        image_hidden=image_hidden,
        image_summary=summary,
        text_embeddings=txt,
        text_hidden=tc.slice_axis(h, 1, n, n + m),
    )
