"""Hierarchy trees, aggregation/structure matrices and the aligned panel container."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, HierarchyError

__all__ = [
    "HierarchyTree",
    "PanelSeries",
    "build_tree",
    "aggregation_matrix",
    "structure_matrix",
    "coherency_error",
    "calendar_covariates",
    "extend_timestamps",
]


@dataclass(frozen=True)
class HierarchyTree:
    """A strict aggregation tree.

    ``nodes`` holds the upper (non-leaf) nodes in breadth-first order followed by
    the leaves in breadth-first order, so the bottom series always occupy the
    last ``m`` positions. For balanced trees this is plain level-order.
    """

    nodes: tuple[str, ...]
    parent: dict[str, str]
    children: dict[str, tuple[str, ...]] = field(repr=False)
    depth: dict[str, int] = field(repr=False)

    @property
    def root(self) -> str:
        return self.nodes[0]

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def m(self) -> int:
        return sum(1 for v in self.nodes if not self.children[v])

    @property
    def r(self) -> int:
        return self.n - self.m

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.nodes[self.r:]

    @property
    def upper(self) -> tuple[str, ...]:
        return self.nodes[: self.r]

    @property
    def index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.nodes)}

    @property
    def edges(self) -> list[tuple[str, str]]:
        """Edges in node order; rebuilding from them reproduces this tree."""
        return [(self.parent[v], v) for v in self.nodes if v in self.parent]

    def levels(self) -> np.ndarray:
        """Depth of every node, aligned with ``nodes``."""
        return np.array([self.depth[v] for v in self.nodes], dtype=int)

    def S(self) -> np.ndarray:
        return aggregation_matrix(self)

    def A(self) -> np.ndarray:
        return structure_matrix(self)


def build_tree(
    edges: Iterable[tuple[str, str]], nodes: Sequence[str] | None = None
) -> HierarchyTree:
    """Build a :class:`HierarchyTree` from ``(parent, child)`` pairs.

    Siblings keep the order in which they first appear in ``edges``. ``nodes``
    optionally declares extra ids that must be attached to the tree.
    """
    edges = [(str(p), str(c)) for p, c in edges]
    if not edges:
        raise HierarchyError("no edges: a hierarchy needs at least one parent-child pair")

    parent: dict[str, str] = {}
    children: dict[str, list[str]] = {}
    seen: list[str] = []

    def touch(v: str) -> None:
        if v not in children:
            children[v] = []
            seen.append(v)

    for p, c in edges:
        if p == c:
            raise HierarchyError(f"cycle detected: self-loop on {p!r}")
        touch(p)
        touch(c)
        if c in parent:
            raise HierarchyError(
                f"duplicate child: {c!r} has parents {parent[c]!r} and {p!r}"
            )
        parent[c] = p
        children[p].append(c)

    for v in nodes or ():
        if str(v) not in children:
            raise HierarchyError(f"disconnected node: {v!r} appears in no edge")

    roots = [v for v in seen if v not in parent]
    if not roots:
        raise HierarchyError("cycle detected: every node has a parent")
    if len(roots) > 1:
        raise HierarchyError(f"multiple roots: {roots}")

    root = roots[0]
    order = []
    depth = {root: 0}
    queue = deque([root])
    while queue:
        v = queue.popleft()
        order.append(v)
        for c in children[v]:
            depth[c] = depth[v] + 1
            queue.append(c)
    if len(order) != len(seen):
        stray = [v for v in seen if v not in depth]
        raise HierarchyError(f"cycle detected among {stray}")

    upper = [v for v in order if children[v]]
    leaves = [v for v in order if not children[v]]
    return HierarchyTree(
        nodes=tuple(upper + leaves),
        parent=parent,
        children={v: tuple(cs) for v, cs in children.items()},
        depth=depth,
    )


def aggregation_matrix(tree: HierarchyTree) -> np.ndarray:
    """The n x m summing matrix; row i marks the leaves under node i."""
    leaf_col = {v: j for j, v in enumerate(tree.leaves)}
    S = np.zeros((tree.n, tree.m), dtype=np.int64)
    for i, v in enumerate(tree.nodes):
        stack = [v]
        while stack:
            u = stack.pop()
            if u in leaf_col:
                S[i, leaf_col[u]] = 1
            else:
                stack.extend(tree.children[u])
    return S


def structure_matrix(tree: HierarchyTree) -> np.ndarray:
    """The r x n constraint matrix ``[I_r | -S_upper]``; its null space is the coherent subspace."""
    S = aggregation_matrix(tree)
    return np.hstack([np.eye(tree.r, dtype=np.int64), -S[: tree.r]])


def coherency_error(y, tree: HierarchyTree) -> float:
    """Max-norm of ``A @ y``.

    ``y`` may carry leading axes (samples, steps); the maximum is taken over all of them.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 0 or y.shape[-1] != tree.n:
        raise DataError(f"dimension mismatch: expected last axis {tree.n}, got shape {y.shape}")
    if tree.r == 0:
        return 0.0
    A = structure_matrix(tree).astype(float)
    return float(np.max(np.abs(y @ A.T)))


def calendar_covariates(
    start: int, count: int, period: int, index_scale: float = 1000.0
) -> np.ndarray:
    """Default covariates: scaled step index plus one seasonal sin/cos pair."""
    t = np.arange(start, start + count, dtype=float)
    angle = 2.0 * np.pi * t / period
    return np.column_stack([t / index_scale, np.sin(angle), np.cos(angle)])


def _regular_grid(timestamps: Sequence[str]) -> None:
    """Raise unless the timestamps are strictly increasing with a constant step."""
    if len(timestamps) < 2:
        return
    try:
        vals = np.array([float(s) for s in timestamps])
        steps = np.diff(vals)
        kind = "numeric"
    except ValueError:
        try:
            dts = [datetime.fromisoformat(s) for s in timestamps]
        except ValueError as exc:
            raise DataError(f"unparseable timestamp: {exc}") from None
        steps = np.array([(b - a).total_seconds() for a, b in zip(dts, dts[1:])])
        kind = "datetime"
        if not np.all(steps == steps[0]) and np.all(steps > 0):
            # calendar-month grids: same day/time, constant month increment
            months = [d.year * 12 + d.month for d in dts]
            same_anchor = all((d.day, d.time()) == (dts[0].day, dts[0].time()) for d in dts)
            msteps = np.diff(months)
            if same_anchor and np.all(msteps == msteps[0]) and msteps[0] > 0:
                return
    if np.any(steps <= 0):
        i = int(np.argmax(steps <= 0))
        raise DataError(
            f"timestamps not strictly increasing at {timestamps[i]!r} -> {timestamps[i + 1]!r}"
        )
    irregular = ~np.isclose(steps, steps[0], rtol=1e-9, atol=0.0)
    if np.any(irregular):
        i = int(np.argmax(irregular))
        raise DataError(
            f"irregular {kind} timestamps: step changes at {timestamps[i + 1]!r}"
        )


def extend_timestamps(timestamps: Sequence[str], count: int) -> list[str] | None:
    """Continue a regular grid by ``count`` steps; ``None`` if the grid cannot be extended."""
    if len(timestamps) < 2:
        return None
    try:
        vals = [float(s) for s in timestamps]
        step = vals[-1] - vals[-2]
        as_int = all(s.lstrip("-").isdigit() for s in timestamps)
        nxt = [vals[-1] + step * k for k in range(1, count + 1)]
        return [str(int(round(v))) if as_int else repr(v) for v in nxt]
    except ValueError:
        pass
    try:
        a, b = datetime.fromisoformat(timestamps[-2]), datetime.fromisoformat(timestamps[-1])
    except ValueError:
        return None
    if (a.day, a.time()) == (b.day, b.time()) and (b.year, b.month) != (a.year, a.month):
        dm = (b.year * 12 + b.month) - (a.year * 12 + a.month)
        out = []
        for k in range(1, count + 1):
            months = b.year * 12 + (b.month - 1) + dm * k
            out.append(b.replace(year=months // 12, month=months % 12 + 1).isoformat())
        return out
    return [(b + (b - a) * k).isoformat() for k in range(1, count + 1)]


@dataclass
class PanelSeries:
    """Observations of every node on a regular time grid.

    ``values`` is T x n in tree node order and ``covariates`` T x c. When the
    covariates were generated by :func:`calendar_covariates`, ``calendar``
    records the arguments so they can be extended past the end of the panel.
    """

    values: np.ndarray
    covariates: np.ndarray
    timestamps: list[str]
    tree: HierarchyTree
    calendar: dict | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates[:, None]
        T = len(self.timestamps)
        if self.values.shape != (T, self.tree.n):
            raise DataError(
                f"values shape {self.values.shape} does not match ({T}, {self.tree.n})"
            )
        if self.covariates.shape[0] != T:
            raise DataError(f"covariates have {self.covariates.shape[0]} rows, expected {T}")
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.covariates)):
            raise DataError("panel contains missing or non-finite values")
        _regular_grid(self.timestamps)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def bottom(self) -> np.ndarray:
        return self.values[:, self.tree.r:]

    def future_covariates(self, count: int) -> np.ndarray:
        """Covariates for ``count`` steps after the panel end (calendar panels only)."""
        if self.calendar is None:
            raise DataError(
                "missing future covariates: panel covariates were supplied externally"
            )
        cal = dict(self.calendar)
        offset = cal.pop("offset", 0)
        return calendar_covariates(offset + self.T, count, **cal)

    def slice(self, start: int, stop: int) -> "PanelSeries":
        """Rows ``[start, stop)``; calendar covariates keep their absolute step index."""
        start, stop, _ = slice(start, stop).indices(self.T)
        cal = None
        if self.calendar is not None:
            cal = dict(self.calendar)
            cal["offset"] = cal.get("offset", 0) + start
        return PanelSeries(
            self.values[start:stop],
            self.covariates[start:stop],
            list(self.timestamps[start:stop]),
            self.tree,
            cal,
        )
