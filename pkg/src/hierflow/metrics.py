"""Quantile-grid CRPS and point-error scores for forecast ensembles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError
from .hierarchy import HierarchyTree

DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def quantile_grid(levels=DEFAULT_GRID) -> np.ndarray:
    q = np.asarray(levels, dtype=float)
    if q.ndim != 1 or q.size == 0:
        raise DataError("quantile grid must be a non-empty 1-D sequence")
    if np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
        raise DataError("quantile levels must be strictly increasing inside (0, 1)")
    return q


def empirical_quantile(samples, q, axis: int = 0):
    """Order-statistic quantile with linear interpolation between closest ranks (type 7)."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0 or samples.shape[axis] == 0:
        raise DataError("empirical_quantile: empty sample set")
    return np.quantile(samples, q, axis=axis, method="linear")


def quantile_score(pred_q, y, q):
    """``2 * (1{y <= pred_q} - q) * (pred_q - y)``, i.e. twice the pinball loss."""
    pred_q = np.asarray(pred_q, dtype=float)
    y = np.asarray(y, dtype=float)
    return 2.0 * ((y <= pred_q).astype(float) - q) * (pred_q - y)


def crps_matrix(samples, actuals, grid=DEFAULT_GRID) -> np.ndarray:
    """Per (step, series) discrete CRPS: grid-average of quantile scores.

    ``samples`` is (count, horizon, n) and ``actuals`` (horizon, n).
    """
    samples = np.asarray(samples, dtype=float)
    actuals = np.asarray(actuals, dtype=float)
    if samples.ndim != 3 or actuals.shape != samples.shape[1:]:
        raise DataError(
            f"shape mismatch: ensemble {samples.shape} (count, horizon, n) "
            f"vs actuals {actuals.shape}"
        )
    q = quantile_grid(grid)
    qs = empirical_quantile(samples, q, axis=0)  # (Q, horizon, n)
    scores = quantile_score(qs, actuals[None], q[:, None, None])
    return scores.mean(axis=0)


@dataclass
class ScoreReport:
    """CRPS and median-error summary.

    ``crps`` / ``per_level`` / ``per_series`` are absolute (mean per step and
    series). ``crps_normalized`` and friends divide the summed scores of a
    slice by the summed ``|y|`` of that slice.
    """

    crps: float
    crps_normalized: float
    per_level: dict[int, float]
    per_level_normalized: dict[int, float]
    per_series: dict[str, float]
    per_series_normalized: dict[str, float]
    mae: dict[str, float]
    mape: dict[str, float]
    sample_count: int
    horizon: int
    levels: dict[str, int] = field(default_factory=dict)
    grid: list[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    normalization: str = (
        "crps: mean over steps and series; crps_normalized: sum of scores / sum of |actual|"
    )

    def to_json(self) -> str:
        d = asdict(self)
        d["per_level"] = {str(k): v for k, v in self.per_level.items()}
        d["per_level_normalized"] = {str(k): v for k, v in self.per_level_normalized.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def csv_rows(self) -> list[tuple]:
        """``level,series_id,crps,mae,mape`` rows, one per series."""
        return [
            (self.levels[s], s, self.per_series[s], self.mae[s], self.mape[s])
            for s in self.per_series
        ]


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else float("nan")


def crps(ensemble, actuals, grid=DEFAULT_GRID, tree: HierarchyTree | None = None) -> ScoreReport:
    """Score an ensemble (a ``ForecastEnsemble`` or raw array plus ``tree``) against actuals."""
    if tree is None:
        tree = ensemble.tree
    samples = getattr(ensemble, "samples", ensemble)
    samples = np.asarray(samples, dtype=float)
    actuals = np.asarray(actuals, dtype=float)
    cm = crps_matrix(samples, actuals, grid)
    abs_y = np.abs(actuals)
    levels = tree.levels()

    median = np.median(samples, axis=0)
    err = np.abs(median - actuals)
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = np.where(abs_y > 0, err / abs_y, np.nan)

    per_series = {v: float(cm[:, i].mean()) for i, v in enumerate(tree.nodes)}
    per_series_n = {v: _ratio(cm[:, i].sum(), abs_y[:, i].sum()) for i, v in enumerate(tree.nodes)}
    per_level, per_level_n = {}, {}
    for lv in sorted(set(levels.tolist())):
        cols = levels == lv
        per_level[lv] = float(cm[:, cols].mean())
        per_level_n[lv] = _ratio(cm[:, cols].sum(), abs_y[:, cols].sum())
    return ScoreReport(
        crps=float(cm.mean()),
        crps_normalized=_ratio(cm.sum(), abs_y.sum()),
        per_level=per_level,
        per_level_normalized=per_level_n,
        per_series=per_series,
        per_series_normalized=per_series_n,
        mae={v: float(err[:, i].mean()) for i, v in enumerate(tree.nodes)},
        mape={v: float(np.nanmean(pct[:, i])) if np.any(np.isfinite(pct[:, i])) else float("nan")
              for i, v in enumerate(tree.nodes)},
        sample_count=samples.shape[0],
        horizon=samples.shape[1],
        levels={v: int(lv) for v, lv in zip(tree.nodes, levels)},
        grid=[float(x) for x in quantile_grid(grid)],
    )
