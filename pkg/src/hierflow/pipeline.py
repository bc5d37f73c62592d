"""End-to-end likelihood training and step-by-step Monte Carlo forecasting."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensorad as ad
from .errors import ConfigError, DataError, NumericError
from .flow import FlowStack
from .hierarchy import HierarchyTree, PanelSeries, build_tree, extend_timestamps
from .reconcile import (
    ForecastEnsemble,
    bottom_up,
    reconcile,
    seasonal_naive,
    seasonal_naive_residuals,
)
from .tensorad import Module, Tensor
from .transformer import AttentionConfig, HierTransformer

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout: float = 0.1
    pre_norm: bool = True
    flow_layers: int = 4
    flow_hidden: int = 64

    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers,
            dropout=self.dropout,
            pre_norm=self.pre_norm,
        )


@dataclass
class TrainConfig:
    context_length: int = 24
    prediction_length: int = 8
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sample_count: int = 200
    seed: int = 0
    patience: int = 10

    def __post_init__(self) -> None:
        if self.context_length < 1:
            raise ConfigError("context_length must be >= 1")
        if self.prediction_length < 1:
            raise ConfigError("prediction_length must be >= 1")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class Scaler:
    """Per-series standardization fitted on the training range."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values) -> "Scaler":
        values = np.asarray(values, dtype=float)
        mu = values.mean(axis=0)
        sd = values.std(axis=0)
        flat = sd == 0
        if np.any(flat):
            warnings.warn(
                f"zero-variance series at columns {np.flatnonzero(flat).tolist()}; std set to 1",
                RuntimeWarning,
            )
            sd = np.where(flat, 1.0, sd)
        return cls(mu, sd)

    def apply(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def invert(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.std + self.mean


def scale_fit(panel: PanelSeries, stop: int | None = None) -> Scaler:
    return Scaler.fit(panel.values[:stop])


def scale_apply(scaler: Scaler, values) -> np.ndarray:
    return scaler.apply(values)


def scale_invert(scaler: Scaler, values) -> np.ndarray:
    return scaler.invert(values)


@dataclass
class WindowBatch:
    """Context/target windows; decoder inputs are the observations one step behind the targets."""

    enc_y: np.ndarray
    enc_x: np.ndarray
    dec_y: np.ndarray
    dec_x: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return self.enc_y.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


def make_windows(values, covariates, r: int, context: int, horizon: int, starts) -> WindowBatch:
    """Slice windows starting at ``starts``: context rows ``[s, s+context)``, targets after."""
    values = np.asarray(values, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    starts = np.asarray(starts, dtype=int)
    T = values.shape[0]
    if starts.size == 0 or starts.min() < 0 or starts.max() + context + horizon > T:
        raise DataError("windows must lie fully inside the series")
    ctx = starts[:, None] + np.arange(context)[None]
    tgt = starts[:, None] + context + np.arange(horizon)[None]
    return WindowBatch(
        enc_y=values[ctx],
        enc_x=covariates[ctx],
        dec_y=values[tgt - 1],
        dec_x=covariates[tgt - 1],
        target=values[tgt][..., r:],
    )


class HierForecaster(Module):
    """Transformer conditions a flow over the bottom series."""

    def __init__(self, tree: HierarchyTree, n_covariates: int, cfg: ModelConfig,
                 rng: np.random.Generator):
        self.transformer = HierTransformer(tree.n, n_covariates, cfg.attention(), rng)
        self.flow = FlowStack(tree.m, cfg.d_model, cfg.flow_layers, cfg.flow_hidden, rng)

    def condition(self, batch: WindowBatch) -> Tensor:
        memory = self.transformer.encode(batch.enc_y, batch.enc_x)
        return self.transformer.decode(batch.dec_y, batch.dec_x, memory)

    def log_prob(self, batch: WindowBatch) -> Tensor:
        """Per-window, per-step log density of the bottom targets, shape (B, L)."""
        return self.flow.log_prob(batch.target, self.condition(batch))


def nll_loss(batch: WindowBatch, model: HierForecaster) -> Tensor:
    """Negative mean log-likelihood over windows and target steps."""
    loss = ad.neg(ad.mean(model.log_prob(batch)))
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite loss {loss.item()}")
    return loss


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    edges: list[tuple[str, str]]
    scaler: Scaler
    n_covariates: int
    calendar: dict | None = None
    log: list[tuple[int, str, float]] = field(default_factory=list)

    @property
    def tree(self) -> HierarchyTree:
        return build_tree(self.edges)

    def build_model(self) -> HierForecaster:
        model = HierForecaster(self.tree, self.n_covariates, self.model_config,
                               np.random.default_rng(0))
        model.load_state_dict(self.params)
        return model

    def save(self, path) -> None:
        extra = {
            "model_config": asdict(self.model_config),
            "train_config": asdict(self.train_config),
            "edges": [list(e) for e in self.edges],
            "scaler": {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()},
            "n_covariates": self.n_covariates,
            "calendar": self.calendar,
        }
        ad.save_checkpoint(path, self.params, extra)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        params, extra = ad.load_checkpoint(path)
        try:
            return cls(
                params=params,
                model_config=ModelConfig(**extra["model_config"]),
                train_config=TrainConfig(**extra["train_config"]),
                edges=[tuple(e) for e in extra["edges"]],
                scaler=Scaler(np.array(extra["scaler"]["mean"]), np.array(extra["scaler"]["std"])),
                n_covariates=int(extra["n_covariates"]),
                calendar=extra.get("calendar"),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: incomplete checkpoint ({exc})") from None


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "nll"])
        for epoch, split, nll in rows:
            w.writerow([epoch, split, repr(float(nll))])


def _evaluate(model: HierForecaster, batch: WindowBatch) -> float:
    model.eval()
    with ad.no_grad():
        value = float(-model.log_prob(batch).data.mean())
    model.train()
    return value


def train(
    panel: PanelSeries,
    train_config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    log_path=None,
    validation: bool = True,
) -> Checkpoint:
    """Fit transformer and flow jointly by maximum likelihood with Adam.

    The last ``prediction_length`` steps are held out for early stopping when
    the panel is long enough; the scaler only sees the training range.
    """
    cfg = train_config
    tree = panel.tree
    Lc, Lp = cfg.context_length, cfg.prediction_length
    T = panel.T
    has_val = validation and T - Lp >= Lc + Lp
    train_T = T - Lp if has_val else T
    if train_T < Lc + Lp:
        raise DataError(
            f"insufficient data: {T} steps cannot hold a {Lc}+{Lp} window"
            + (" plus a validation tail" if validation else "")
        )

    scaler = Scaler.fit(panel.values[:train_T])
    values = scaler.apply(panel.values)
    train_batch = make_windows(values, panel.covariates, tree.r, Lc, Lp,
                               np.arange(train_T - Lc - Lp + 1))
    val_batch = (make_windows(values, panel.covariates, tree.r, Lc, Lp, [T - Lc - Lp])
                 if has_val else None)

    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model = HierForecaster(tree, panel.n_covariates, model_config, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    params = model.parameters()
    opt = ad.Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    rows: list[tuple[int, str, float]] = []
    best = (math.inf, model.state_dict())
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_batch))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = train_batch.take(order[lo: lo + cfg.batch_size])
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = nll_loss(batch, model)
                tape.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
        train_nll = total / len(train_batch)
        if not math.isfinite(train_nll):
            raise NumericError(f"training diverged at epoch {epoch}")
        rows.append((epoch, "train", train_nll))
        monitor = train_nll
        if val_batch is not None:
            monitor = _evaluate(model, val_batch)
            rows.append((epoch, "val", monitor))
        log.info("epoch %d train_nll=%.5f monitor=%.5f", epoch, train_nll, monitor)
        if monitor < best[0]:
            best = (monitor, model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break
    if cfg.epochs > 0:
        model.load_state_dict(best[1])

    if log_path is not None:
        write_training_log(log_path, rows)
    return Checkpoint(
        params=model.state_dict(),
        model_config=model_config,
        train_config=cfg,
        edges=tree.edges,
        scaler=scaler,
        n_covariates=panel.n_covariates,
        calendar=panel.calendar,
        log=rows,
    )


def rollout(
    model: HierForecaster,
    scaler: Scaler,
    tree: HierarchyTree,
    enc_y: np.ndarray,
    enc_x: np.ndarray,
    dec_x: np.ndarray,
    noise: np.ndarray,
    descale: bool = True,
) -> np.ndarray:
    """Autoregressive sampling of coherent paths.

    ``enc_y``/``enc_x`` are the scaled context (L, n) and its covariates;
    ``dec_x`` holds covariates for the decoder inputs (horizon, c), starting
    with the last context step. ``noise`` (horizon, count, m) supplies the
    latent draws, so path ``i`` depends only on ``noise[:, i]``. Each path's
    coherent sample is fed back as its next decoder input.
    """
    horizon, count, m = noise.shape
    S = tree.S().astype(float)
    mu_b, sd_b = scaler.mean[tree.r:], scaler.std[tree.r:]
    model.eval()
    with ad.no_grad():
        memory = model.transformer.encode(enc_y[None], enc_x[None])
        memory = ad.Tensor(np.broadcast_to(memory.data, (count,) + memory.shape[1:]).copy())
        dec_y = np.empty((count, horizon, tree.n))
        dec_y[:, 0] = enc_y[-1]
        dec_xb = np.broadcast_to(dec_x[None], (count,) + dec_x.shape)
        out = np.empty((count, horizon, tree.n))
        for k in range(horizon):
            h = model.transformer.decode(dec_y[:, : k + 1], dec_xb[:, : k + 1], memory)
            b_scaled = model.flow.inverse_transform(noise[k], h.data[:, k]).data
            y = bottom_up(mu_b + sd_b * b_scaled, S)
            out[:, k] = y if descale else bottom_up(b_scaled, S)
            if k + 1 < horizon:
                dec_y[:, k + 1] = scaler.apply(y)
    model.train()
    return out


def forecast(
    panel: PanelSeries,
    checkpoint: Checkpoint,
    horizon: int,
    sample_count: int | None = None,
    seed: int | None = None,
    future_covariates=None,
    descale: bool = True,
) -> ForecastEnsemble:
    """Sample ``sample_count`` coherent paths for the ``horizon`` steps after the panel end."""
    tree = panel.tree
    if tuple(n for e in checkpoint.edges for n in e) != tuple(n for e in tree.edges for n in e):
        raise DataError("checkpoint/hierarchy mismatch: node sets or order differ")
    if panel.n_covariates != checkpoint.n_covariates:
        raise DataError(
            f"checkpoint expects {checkpoint.n_covariates} covariates, panel has {panel.n_covariates}"
        )
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    cfg = checkpoint.train_config
    count = cfg.sample_count if sample_count is None else sample_count
    if count < 1:
        raise ConfigError("sample_count must be >= 1")
    Lc = cfg.context_length
    if panel.T < Lc:
        raise DataError(f"need {Lc} context steps, panel has {panel.T}")

    if horizon > 1:
        if future_covariates is None:
            future = panel.future_covariates(horizon - 1)
        else:
            future = np.asarray(future_covariates, dtype=float)
            if future.ndim != 2 or future.shape[0] < horizon - 1 or future.shape[1] != panel.n_covariates:
                raise DataError(
                    f"missing future covariates: need ({horizon - 1}, {panel.n_covariates}), "
                    f"got {future.shape}"
                )
            future = future[: horizon - 1]
        dec_x = np.vstack([panel.covariates[-1:], future])
    else:
        dec_x = panel.covariates[-1:]

    scaler = checkpoint.scaler
    enc_y = scaler.apply(panel.values[-Lc:])
    enc_x = panel.covariates[-Lc:]
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    noise = rng.standard_normal((horizon, count, tree.m))
    model = checkpoint.build_model()
    samples = rollout(model, scaler, tree, enc_y, enc_x, dec_x, noise, descale)
    return ForecastEnsemble(samples, tree, extend_timestamps(panel.timestamps, horizon))


def baseline_forecast(
    panel: PanelSeries, horizon: int, method: str, period: int
) -> ForecastEnsemble:
    """Seasonal-naive base forecasts reconciled by one of the closed-form baselines."""
    tree = panel.tree
    period = min(period, panel.T)
    if method == "naive-bu":
        point = seasonal_naive(panel.bottom, horizon, period) @ tree.S().T.astype(float)
    else:
        base = seasonal_naive(panel.values, horizon, period)
        resid = seasonal_naive_residuals(panel.values, period) if method == "mint-shr" else None
        point = reconcile(base, tree, method, resid)
    return ForecastEnsemble(point[None], tree, extend_timestamps(panel.timestamps, horizon))


def untrained_checkpoint(panel: PanelSeries, train_config: TrainConfig,
                         model_config: ModelConfig = ModelConfig()) -> Checkpoint:
    """Initialization-only checkpoint (equivalent to ``epochs=0``)."""
    cfg = TrainConfig(**{**asdict(train_config), "epochs": 0})
    return train(panel, cfg, model_config)


__all__ = [
    "ModelConfig",
    "TrainConfig",
    "Scaler",
    "scale_fit",
    "scale_apply",
    "scale_invert",
    "WindowBatch",
    "make_windows",
    "HierForecaster",
    "nll_loss",
    "Checkpoint",
    "train",
    "rollout",
    "forecast",
    "baseline_forecast",
    "untrained_checkpoint",
    "bottom_up",
]
