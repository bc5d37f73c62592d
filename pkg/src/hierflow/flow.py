"""Conditional affine-coupling flow over the bottom-level series.

The data-to-latent map ``b -> z`` applies, per layer, a fixed permutation and
then ``z_B = b_B * exp(s) + t`` with ``(s, t)`` computed from ``concat(b_A, h)``.
Its log-Jacobian is the sum of the scale outputs. Sampling runs the layers
backwards from standard-normal noise.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensorad as ad
from .errors import ConfigError, NumericError
from .tensorad import Module, Tensor
from .transformer import Linear

LOG_2PI = math.log(2.0 * math.pi)


class ConditionerNet(Module):
    """Two tanh hidden layers; the output layer starts small so the flow starts near identity."""

    def __init__(self, d_in: int, d_out: int, hidden: int, rng: np.random.Generator,
                 out_gain: float = 0.1):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, d_out, rng, gain=out_gain)

    def __call__(self, x) -> Tensor:
        return self.fc3(ad.tanh(self.fc2(ad.tanh(self.fc1(x)))))


class CouplingLayer(Module):
    """Permute, keep the first ``d`` coordinates, affinely transform the rest."""

    def __init__(self, m: int, d: int, cond_dim: int, hidden: int, permutation,
                 rng: np.random.Generator, scale_bound: float = 2.0):
        if not 1 <= d < m:
            raise ConfigError(f"coupling split d={d} invalid for m={m}")
        perm = np.asarray(permutation, dtype=int)
        if sorted(perm.tolist()) != list(range(m)):
            raise ConfigError(f"permutation {perm.tolist()} is not a bijection on 0..{m - 1}")
        self.m, self.d = m, d
        self.perm = perm
        self.inv_perm = np.argsort(perm)
        self.s_net = ConditionerNet(d + cond_dim, m - d, hidden, rng)
        self.t_net = ConditionerNet(d + cond_dim, m - d, hidden, rng)
        self.log_bound = ad.parameter(np.full(m - d, math.log(scale_bound)))

    def _st(self, keep: Tensor, h) -> tuple[Tensor, Tensor]:
        inp = ad.concat([keep, h])
        s = ad.mul(ad.tanh(self.s_net(inp)), ad.exp(self.log_bound))
        return s, self.t_net(inp)

    def forward(self, b: Tensor, h) -> tuple[Tensor, Tensor]:
        x = ad.getitem(b, (Ellipsis, self.perm))
        keep = ad.getitem(x, (Ellipsis, slice(0, self.d)))
        move = ad.getitem(x, (Ellipsis, slice(self.d, self.m)))
        s, t = self._st(keep, h)
        out = ad.concat([keep, ad.add(ad.mul(move, ad.exp(s)), t)])
        return out, ad.tsum(s, axis=-1)

    def inverse(self, z: Tensor, h) -> Tensor:
        keep = ad.getitem(z, (Ellipsis, slice(0, self.d)))
        move = ad.getitem(z, (Ellipsis, slice(self.d, self.m)))
        s, t = self._st(keep, h)
        x = ad.concat([keep, ad.mul(ad.sub(move, t), ad.exp(ad.neg(s)))])
        return ad.getitem(x, (Ellipsis, self.inv_perm))


class ScalarAffineLayer(Module):
    """Single-series fallback: ``z = b * exp(s(h)) + t(h)``."""

    def __init__(self, cond_dim: int, hidden: int, rng: np.random.Generator,
                 scale_bound: float = 2.0):
        self.m = 1
        self.s_net = ConditionerNet(cond_dim, 1, hidden, rng)
        self.t_net = ConditionerNet(cond_dim, 1, hidden, rng)
        self.log_bound = ad.parameter(np.full(1, math.log(scale_bound)))

    def _st(self, h) -> tuple[Tensor, Tensor]:
        s = ad.mul(ad.tanh(self.s_net(h)), ad.exp(self.log_bound))
        return s, self.t_net(h)

    def forward(self, b: Tensor, h) -> tuple[Tensor, Tensor]:
        s, t = self._st(h)
        return ad.add(ad.mul(b, ad.exp(s)), t), ad.tsum(s, axis=-1)

    def inverse(self, z: Tensor, h) -> Tensor:
        s, t = self._st(h)
        return ad.mul(ad.sub(z, t), ad.exp(ad.neg(s)))


class FlowStack(Module):
    """K conditional layers with a standard-normal base on R^m.

    Odd layers reverse the coordinate order so every coordinate gets transformed.
    Methods accept arrays or tensors; ``b`` and ``h`` carry matching leading
    axes (``h`` may also be a single vector, broadcast over the batch).
    """

    def __init__(self, m: int, cond_dim: int, n_layers: int = 4, hidden: int = 64,
                 rng: np.random.Generator | None = None, permutations=None):
        rng = np.random.default_rng(0) if rng is None else rng
        if m < 1 or n_layers < 1:
            raise ConfigError("flow needs m >= 1 and at least one layer")
        self.m = m
        self.cond_dim = cond_dim
        if m == 1:
            self.layers = [ScalarAffineLayer(cond_dim, hidden, rng) for _ in range(n_layers)]
            return
        if permutations is None:
            permutations = [
                np.arange(m) if k % 2 == 0 else np.arange(m)[::-1] for k in range(n_layers)
            ]
        self.layers = [
            CouplingLayer(m, m // 2, cond_dim, hidden, permutations[k], rng)
            for k in range(n_layers)
        ]

    def _cond(self, h, lead: tuple) -> Tensor:
        h = ad.tensor(h)
        if h.ndim == 1 and lead:
            h = ad.add(np.zeros(lead + h.shape), h)
        return h

    @staticmethod
    def _row(h) -> Tensor:
        h = ad.tensor(h)
        return ad.reshape(h, (1, h.shape[-1])) if h.ndim == 1 else h

    def forward_transform(self, b, h) -> tuple[Tensor, Tensor]:
        """Map data to latent space; returns ``(z, log|det dz/db|)``."""
        z = ad.tensor(b)
        if z.ndim == 1:
            z, logdet = self.forward_transform(ad.reshape(z, (1, self.m)), self._row(h))
            return ad.reshape(z, (self.m,)), ad.reshape(logdet, ())
        h = self._cond(h, z.shape[:-1])
        logdet = None
        for layer in self.layers:
            z, ld = layer.forward(z, h)
            logdet = ld if logdet is None else ad.add(logdet, ld)
        if not np.all(np.isfinite(z.data)) or not np.all(np.isfinite(logdet.data)):
            raise NumericError("flow forward produced non-finite values")
        return z, logdet

    def inverse_transform(self, z, h) -> Tensor:
        b = ad.tensor(z)
        if b.ndim == 1:
            return ad.reshape(self.inverse_transform(ad.reshape(b, (1, self.m)), self._row(h)), (self.m,))
        h = self._cond(h, b.shape[:-1])
        for layer in reversed(self.layers):
            b = layer.inverse(b, h)
        if not np.all(np.isfinite(b.data)):
            raise NumericError("flow inverse produced non-finite values")
        return b

    def log_prob(self, b, h) -> Tensor:
        """``log N(z; 0, I) + logdet`` per row."""
        z, logdet = self.forward_transform(b, h)
        base = ad.affine(ad.tsum(ad.mul(z, z), axis=-1), -0.5, -0.5 * self.m * LOG_2PI)
        return ad.add(base, logdet)

    def sample(self, h, count: int, rng_seed=None) -> np.ndarray:
        """``count`` draws for a single condition vector ``h``; returns (count, m)."""
        if count < 1:
            raise ConfigError("sample count must be positive")
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        z = rng.standard_normal((count, self.m))
        with ad.no_grad():
            return self.inverse_transform(z, np.asarray(getattr(h, "data", h), dtype=float)).data
