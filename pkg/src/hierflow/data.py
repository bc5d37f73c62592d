"""File formats: hierarchy edges, long-format panels, ensembles, base forecasts, matrices.

Synthetic hierarchical panels are generated here too.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .hierarchy import (
    HierarchyTree,
    PanelSeries,
    build_tree,
    calendar_covariates,
    coherency_error,
)
from .metrics import ScoreReport
from .reconcile import ForecastEnsemble

log = logging.getLogger(__name__)

FAMILIES = ("gaussian-ar1", "seasonal-sine", "heavy-tail-ar1")
# Bottom values are rounded to this grid so every partial sum is exact in
# float64 and the generated panel is coherent bit-for-bit in any summation order.
QUANTUM = 2.0**-20


def _fmt(x: float) -> str:
    return repr(float(x))


def _reader(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    return fh


def read_hierarchy(path) -> HierarchyTree:
    """Parse a ``parent,child`` edge CSV."""
    with _reader(path) as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["parent", "child"]:
        raise DataError(f"{path}: header must be 'parent,child'")
    edges = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        edges.append((row[0].strip(), row[1].strip()))
    return build_tree(edges)


def write_hierarchy(path, tree: HierarchyTree) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parent", "child"])
        w.writerows(tree.edges)


def load_panel(
    hierarchy_path,
    panel_path,
    season_period: int = 12,
    index_scale: float = 1000.0,
    coherency_tol: float = 1e-6,
) -> PanelSeries:
    """Read a long ``timestamp,series_id,value[,cov...]`` CSV and pivot it to tree order.

    Covariate columns, when present, must agree across series at each timestamp.
    Without covariates, calendar features are generated.
    """
    tree = read_hierarchy(hierarchy_path) if not isinstance(hierarchy_path, HierarchyTree) else hierarchy_path
    with _reader(panel_path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{panel_path}: empty file")
    header = [c.strip() for c in rows[0]]
    if header[:3] != ["timestamp", "series_id", "value"]:
        raise DataError(f"{panel_path}: header must start with 'timestamp,series_id,value'")
    cov_names = header[3:]
    index = tree.index
    ts_order: list[str] = []
    ts_pos: dict[str, int] = {}
    cells: dict[tuple[int, int], float] = {}
    covs: dict[int, tuple[float, ...]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{panel_path}:{lineno}: expected {len(header)} fields")
        ts, sid = row[0].strip(), row[1].strip()
        if sid not in index:
            raise DataError(f"{panel_path}:{lineno}: unknown series_id {sid!r}")
        if ts not in ts_pos:
            ts_pos[ts] = len(ts_order)
            ts_order.append(ts)
        t = ts_pos[ts]
        try:
            val = float(row[2])
            cov = tuple(float(c) for c in row[3:])
        except ValueError:
            raise DataError(f"{panel_path}:{lineno}: non-numeric value") from None
        if (t, index[sid]) in cells:
            raise DataError(f"{panel_path}:{lineno}: duplicate cell ({ts}, {sid})")
        cells[(t, index[sid])] = val
        if cov_names:
            if t in covs and covs[t] != cov:
                raise DataError(f"{panel_path}:{lineno}: covariates differ across series at {ts}")
            covs[t] = cov

    T = len(ts_order)
    values = np.full((T, tree.n), np.nan)
    for (t, i), v in cells.items():
        values[t, i] = v
    missing = np.argwhere(np.isnan(values))
    if missing.size:
        t, i = missing[0]
        raise DataError(
            f"missing cell (timestamp={ts_order[t]}, series_id={tree.nodes[i]}); "
            f"{len(missing)} missing in total"
        )
    # rows may arrive unsorted; order by parsed timestamp
    try:
        keys = [float(s) for s in ts_order]
    except ValueError:
        keys = list(ts_order)
    order = sorted(range(T), key=lambda k: keys[k])
    values = values[order]
    ts_sorted = [ts_order[k] for k in order]

    if cov_names:
        covariates = np.array([covs[k] for k in order])
        calendar = None
    else:
        covariates = calendar_covariates(0, T, season_period, index_scale)
        calendar = {"period": season_period, "index_scale": index_scale, "offset": 0}
    panel = PanelSeries(values, covariates, ts_sorted, tree, calendar)
    err = coherency_error(values, tree)
    if err > coherency_tol:
        log.warning("panel is not coherent: max coherency_error %.3g", err)
    return panel


def write_panel(path, panel: PanelSeries, include_covariates: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["timestamp", "series_id", "value"]
        if include_covariates:
            header += [f"cov_{k + 1}" for k in range(panel.n_covariates)]
        w.writerow(header)
        for t, ts in enumerate(panel.timestamps):
            extra = [_fmt(c) for c in panel.covariates[t]] if include_covariates else []
            for i, sid in enumerate(panel.tree.nodes):
                w.writerow([ts, sid, _fmt(panel.values[t, i])] + extra)


@dataclass
class SyntheticSpec:
    depth: int = 2
    branching: int = 2
    length: int = 200
    family: str = "gaussian-ar1"
    noise: float = 1.0
    seed: int = 0
    period: int = 12

    def __post_init__(self) -> None:
        if self.depth < 1 or self.branching < 1:
            raise ConfigError("depth and branching must be >= 1")
        if self.length < 16:
            raise ConfigError("synthetic series need length >= 16")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


def synthetic_tree(depth: int, branching: int) -> HierarchyTree:
    """Balanced tree named by path: ``T``, ``T.0``, ``T.0.1``, ..."""
    edges = []
    frontier = ["T"]
    for _ in range(depth):
        nxt = []
        for p in frontier:
            for k in range(branching):
                c = f"{p}.{k}"
                edges.append((p, c))
                nxt.append(c)
        frontier = nxt
    return build_tree(edges)


def simulate(spec: SyntheticSpec) -> tuple[PanelSeries, dict]:
    """Simulate bottom series and sum them up the tree. Returns the panel and generator parameters."""
    tree = synthetic_tree(spec.depth, spec.branching)
    rng = np.random.default_rng(spec.seed)
    m, T = tree.m, spec.length
    level = rng.uniform(10.0, 20.0, size=m)
    params: dict = {"level": level.tolist()}
    b = np.empty((T, m))
    if spec.family in ("gaussian-ar1", "heavy-tail-ar1"):
        phi = rng.uniform(0.6, 0.9, size=m)
        start = level + rng.uniform(-5.0, 5.0, size=m)
        if spec.family == "gaussian-ar1":
            eps = rng.standard_normal((T, m))
        else:
            eps = rng.standard_t(3.0, size=(T, m))
        b[0] = start
        for t in range(1, T):
            b[t] = level + phi * (b[t - 1] - level) + spec.noise * eps[t]
        params.update(phi=phi.tolist(), start=start.tolist())
    else:
        amp = rng.uniform(1.0, 4.0, size=m)
        phase = rng.uniform(0.0, 2 * np.pi, size=m)
        t = np.arange(T)[:, None]
        b = level + amp * np.sin(2 * np.pi * t / spec.period + phase)
        b = b + spec.noise * rng.standard_normal((T, m))
        params.update(amplitude=amp.tolist(), phase=phase.tolist())
    b = np.round(b / QUANTUM) * QUANTUM
    values = b @ tree.S().T.astype(float)
    panel = PanelSeries(
        values,
        calendar_covariates(0, T, spec.period),
        [str(k) for k in range(T)],
        tree,
        {"period": spec.period, "index_scale": 1000.0, "offset": 0},
    )
    meta = {"spec": asdict(spec), "nodes": list(tree.nodes), "params": params}
    return panel, meta


def generate_synthetic(spec: SyntheticSpec, out_dir, holdout: int = 0) -> dict[str, Path]:
    """Write ``hierarchy.csv``, ``panel.csv`` and ``synth.json`` (plus train/test splits if ``holdout``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel, meta = simulate(spec)
    paths = {"hierarchy": out / "hierarchy.csv", "panel": out / "panel.csv", "meta": out / "synth.json"}
    write_hierarchy(paths["hierarchy"], panel.tree)
    write_panel(paths["panel"], panel)
    if holdout:
        if not 0 < holdout < panel.T:
            raise ConfigError(f"holdout must lie in (0, {panel.T})")
        paths["train"] = out / "train.csv"
        paths["test"] = out / "test.csv"
        write_panel(paths["train"], panel.slice(0, panel.T - holdout))
        write_panel(paths["test"], panel.slice(panel.T - holdout, panel.T))
        meta["holdout"] = holdout
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


# ensembles / base forecasts -------------------------------------------------


def write_ensemble(path, ensemble: ForecastEnsemble) -> None:
    """``sample_id,step,node_id,value`` with 1-based steps."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "step", "node_id", "value"])
        nodes = ensemble.tree.nodes
        for s in range(ensemble.count):
            for k in range(ensemble.horizon):
                row = ensemble.samples[s, k]
                for i, sid in enumerate(nodes):
                    w.writerow([s, k + 1, sid, _fmt(row[i])])


def read_ensemble(path, tree: HierarchyTree) -> np.ndarray:
    """Read a ``sample_id,step,node_id,value`` CSV into a (count, horizon, n) array."""
    with _reader(path) as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["sample_id", "step", "node_id", "value"]:
        raise DataError(f"{path}: header must be 'sample_id,step,node_id,value'")
    index = tree.index
    recs = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            s, k, sid, v = int(row[0]), int(row[1]), row[2].strip(), float(row[3])
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: malformed row") from None
        if sid not in index:
            raise DataError(f"{path}:{lineno}: unknown node_id {sid!r}")
        recs.append((s, k, index[sid], v))
    if not recs:
        raise DataError(f"{path}: no rows")
    samples = sorted({r[0] for r in recs})
    steps = sorted({r[1] for r in recs})
    s_pos = {s: i for i, s in enumerate(samples)}
    k_pos = {k: i for i, k in enumerate(steps)}
    out = np.full((len(samples), len(steps), tree.n), np.nan)
    for s, k, i, v in recs:
        out[s_pos[s], k_pos[k], i] = v
    if np.isnan(out).any():
        s, k, i = np.argwhere(np.isnan(out))[0]
        raise DataError(
            f"{path}: missing value for sample {samples[s]}, step {steps[k]}, node {tree.nodes[i]}"
        )
    return out


def write_matrix(path, M: np.ndarray, row_ids, col_ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(col_ids))
        for rid, row in zip(row_ids, np.asarray(M)):
            w.writerow([rid] + [_fmt(x) if not float(x).is_integer() else str(int(x)) for x in row])


def read_residuals(path, tree: HierarchyTree) -> np.ndarray:
    """Residuals in the panel's long format (``timestamp,series_id,value``)."""
    return load_panel(tree, path).values


def write_report(report: ScoreReport, json_path, csv_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "series_id", "crps", "mae", "mape"])
            for lv, sid, c, mae, mape in report.csv_rows():
                w.writerow([lv, sid, _fmt(c), _fmt(mae), _fmt(mape)])


def seed_from_env(default: int = 0) -> int:
    raw = os.environ.get("HIERFLOW_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"HIERFLOW_SEED must be an integer, got {raw!r}") from None
