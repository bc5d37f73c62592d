"""Multivariate encoder-decoder transformer with causal self-attention.

One parameter set serves every series: the input projection maps the
concatenated all-level observation and covariates of a step to ``d_model``,
and the decoder returns one ``d_model`` condition vector per forecast step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorad as ad
from .errors import ConfigError, DataError, NumericError
from .tensorad import Module, Tensor

MASK_VALUE = -1e30


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout: float = 0.1
    pre_norm: bool = True

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def causal_mask(length: int) -> np.ndarray:
    """L x L additive mask: 0 on and below the diagonal, ``MASK_VALUE`` above."""
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def positional_encoding(positions, d_model: int) -> np.ndarray:
    """Fixed sinusoidal encoding, one row per position."""
    pos = np.asarray(positions, dtype=float)[:, None]
    i = np.arange(d_model)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d_model)
    angle = pos * rates
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def attention(Q, K, V, mask=None) -> Tensor:
    """``softmax(Q K^T / sqrt(d) + mask) V`` over the last two axes."""
    Q, K, V = ad.tensor(Q), ad.tensor(K), ad.tensor(V)
    if K.shape[-2] != V.shape[-2]:
        raise DataError(f"attention: K has {K.shape[-2]} steps, V has {V.shape[-2]}")
    scores = ad.affine(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        if mask.shape != scores.shape[-2:]:
            raise DataError(f"attention: mask {mask.shape} vs scores {scores.shape[-2:]}")
        scores = ad.add(scores, mask)
    out = ad.matmul(ad.softmax(scores), V)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("attention produced non-finite values")
    return out


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0):
        bound = gain * math.sqrt(6.0 / (d_in + d_out))
        self.W = ad.parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.b = ad.parameter(np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ad.parameter(np.ones(d))
        self.beta = ad.parameter(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x), self.gamma), self.beta)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return ad.mul(x, keep / (1.0 - self.rate))


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_head
        self.q = Linear(cfg.d_model, cfg.d_model, rng)
        self.k = Linear(cfg.d_model, cfg.d_model, rng)
        self.v = Linear(cfg.d_model, cfg.d_model, rng)
        self.o = Linear(cfg.d_model, cfg.d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return ad.transpose(ad.reshape(x, (B, L, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask=None) -> Tensor:
        B, L, D = x_q.shape
        heads = attention(
            self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv)), mask
        )
        merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, L, D))
        return self.o(merged)


class FeedForward(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.fc1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.fc2 = Linear(cfg.d_ff, cfg.d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.pre_norm = cfg.pre_norm
        self.attn = MultiHeadAttention(cfg, rng)
        self.ff = FeedForward(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if self.pre_norm:
            h = self.norm1(x)
            x = ad.add(x, self.drop(self.attn(h, h)))
            return ad.add(x, self.drop(self.ff(self.norm2(x))))
        x = self.norm1(ad.add(x, self.drop(self.attn(x, x))))
        return self.norm2(ad.add(x, self.drop(self.ff(x))))


class DecoderLayer(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.pre_norm = cfg.pre_norm
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.ff = FeedForward(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.norm3 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x: Tensor, memory: Tensor, mask) -> Tensor:
        if self.pre_norm:
            h = self.norm1(x)
            x = ad.add(x, self.drop(self.self_attn(h, h, mask)))
            x = ad.add(x, self.drop(self.cross_attn(self.norm2(x), memory)))
            return ad.add(x, self.drop(self.ff(self.norm3(x))))
        x = self.norm1(ad.add(x, self.drop(self.self_attn(x, x, mask))))
        x = self.norm2(ad.add(x, self.drop(self.cross_attn(x, memory))))
        return self.norm3(ad.add(x, self.drop(self.ff(x))))


class HierTransformer(Module):
    """Encoder-decoder over all-level observations.

    Inputs are batched arrays: ``y`` of shape (B, L, n) and ``x`` of shape
    (B, L, c). Encoder step ``j`` sits at position ``j``; decoder step ``k``
    continues at position ``context_length + k``.
    """

    def __init__(
        self,
        n_series: int,
        n_covariates: int,
        cfg: AttentionConfig = AttentionConfig(),
        rng: np.random.Generator | None = None,
        readout: bool = False,
    ):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.n_series = n_series
        self.n_covariates = n_covariates
        width = n_series + n_covariates
        self.enc_embed = Linear(width, cfg.d_model, rng)
        self.dec_embed = Linear(width, cfg.d_model, rng)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.n_enc_layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.n_dec_layers)]
        self.enc_norm = LayerNorm(cfg.d_model)
        self.dec_norm = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)
        # diagnostics only; never part of the likelihood
        self.readout = Linear(cfg.d_model, n_series, rng) if readout else None

    def _check(self, y, x) -> np.ndarray:
        y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=float)
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
        if y.ndim == 2:
            y, x = y[None], x[None]
        if y.shape[-1] != self.n_series or x.shape[-1] != self.n_covariates:
            raise DataError(
                f"expected {self.n_series} series and {self.n_covariates} covariates, "
                f"got {y.shape[-1]} and {x.shape[-1]}"
            )
        if y.shape[:2] != x.shape[:2]:
            raise DataError(f"observations {y.shape} and covariates {x.shape} misaligned")
        return np.concatenate([y, x], axis=-1)

    def embed(self, y, x, start: int = 0, decoder: bool = False) -> Tensor:
        """Project ``concat(y, x)`` and add the position encoding for ``start, start+1, ...``."""
        inp = self._check(y, x)
        proj = (self.dec_embed if decoder else self.enc_embed)(inp)
        pe = positional_encoding(np.arange(start, start + inp.shape[1]), self.cfg.d_model)
        return ad.add(proj, pe)

    def encode(self, y, x) -> Tensor:
        """Memory of shape (B, L_ctx, d_model) for a context window."""
        if np.shape(y)[-2] < 1:
            raise DataError("encode: empty context")
        h = self.drop(self.embed(y, x))
        for layer in self.encoder:
            h = layer(h)
        return self.enc_norm(h)

    def decode(self, y_prev, x_prev, memory: Tensor, start: int | None = None) -> Tensor:
        """Condition vectors (B, L, d_model); row ``k`` sees decoder inputs ``0..k`` only.

        ``y_prev[:, k]`` is the observation preceding forecast step ``k``.
        """
        if start is None:
            start = memory.shape[1]
        h = self.drop(self.embed(y_prev, x_prev, start, decoder=True))
        if h.shape[0] != memory.shape[0]:
            raise DataError(f"decoder batch {h.shape[0]} vs memory batch {memory.shape[0]}")
        mask = causal_mask(h.shape[1])
        for layer in self.decoder:
            h = layer(h, memory, mask)
        return self.dec_norm(h)

    def read_out(self, h: Tensor) -> Tensor:
        if self.readout is None:
            raise DataError("model was built without a read-out head")
        return self.readout(h)
