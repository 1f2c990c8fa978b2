"""Binary MRF regularization of a probability map on the 6-connected voxel grid.

Energy: ``E(L) = sum_i -log p_i(L_i)
+ lambda * sum_{(i,j) in N6} [L_i != L_j] * exp(-(I_i - I_j)^2 / (2 sigma^2))``
with probabilities clamped away from 0/1 and scribble voxels hard-constrained
to their class.  Minimized exactly by max-flow / min-cut.

The solver is a lockstep push-relabel on the grid: pushes and relabels are
vectorized over all active voxels, with periodic exact-distance (BFS from the
sink) height resets.  Saturating arithmetic on IEEE floats keeps residual
capacities exact (every push moves min(excess, capacity), so zeros are hit
exactly), and the final cut is read off as sink-side reachability in the
residual graph.  Deterministic: fixed direction order, no randomness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grid import LabelMap, ProbMap, ScribbleSet, Volume

_AXES = (0, 1, 2)  # z, y, x in grid view order


@dataclass(frozen=True)
class GraphCutConfig:
    lam: float = 2.5
    sigma: float = 0.15
    prob_floor: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.sigma <= 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.prob_floor < 0.5:
            raise ValidationError(f"prob_floor must be in (0, 0.5), got {self.prob_floor}")


def _unaries(prob: ProbMap, cfg: GraphCutConfig) -> tuple[np.ndarray, np.ndarray]:
    p = np.clip(prob.prob.astype(np.float64), cfg.prob_floor, 1.0 - cfg.prob_floor)
    return -np.log(1.0 - p), -np.log(p)  # cost of label 0, cost of label 1


def _pairwise(v: Volume, cfg: GraphCutConfig) -> list[np.ndarray]:
    """Per-axis contrast weights between voxel i and its +1 neighbor."""
    g = v.grid.astype(np.float64)
    weights = []
    for axis in _AXES:
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        diff = g[tuple(lo)] - g[tuple(hi)]
        weights.append(cfg.lam * np.exp(-(diff ** 2) / (2.0 * cfg.sigma ** 2)))
    return weights


def energy_of(labels: LabelMap, prob: ProbMap, v: Volume, cfg: GraphCutConfig = GraphCutConfig()) -> float:
    """Exact evaluation of the MRF energy for a given labeling."""
    if labels.dims != prob.dims or labels.dims != v.dims:
        raise ValidationError("dims mismatch between labels, probabilities and volume")
    u0, u1 = _unaries(prob, cfg)
    lab = labels.labels.astype(bool)
    total = float(np.where(lab, u1, u0).sum())
    lab3 = labels.grid.astype(bool)
    for axis, w in zip(_AXES, _pairwise(v, cfg)):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        cut = lab3[tuple(lo)] != lab3[tuple(hi)]
        total += float(w[cut].sum())
    return total


def _lohi(axis: int) -> tuple[tuple[slice, ...], tuple[slice, ...]]:
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return tuple(lo), tuple(hi)


class _GridMaxFlow:
    """Phase-1 push-relabel max-flow on a 6-connected grid with terminal links."""

    def __init__(self, cap_fwd: list[np.ndarray], cap_bwd: list[np.ndarray],
                 excess: np.ndarray, cap_sink: np.ndarray):
        self.cap_fwd = cap_fwd  # residual i -> i+1 per axis
        self.cap_bwd = cap_bwd  # residual i+1 -> i per axis
        self.excess = excess
        self.cap_sink = cap_sink
        self.shape = excess.shape
        self.n = excess.size
        # a residual path to the sink visits at most n grid nodes plus the
        # terminal edge, so any true distance is <= n; n + 1 marks "dead"
        self.dead = self.n + 1
        self.height = np.zeros(self.shape, dtype=np.int64)
        self.absorbed = 0.0

    def _sink_distances(self) -> np.ndarray:
        """Exact BFS residual distance to the sink; unreachable voxels get n + 1."""
        dist = np.full(self.shape, self.dead, dtype=np.int64)
        frontier = self.cap_sink > 0
        dist[frontier] = 1
        level = 1
        while frontier.any():
            level += 1
            nxt = np.zeros(self.shape, dtype=bool)
            for axis in _AXES:
                lo, hi = _lohi(axis)
                # edge u(lo) -> v(hi) usable if residual fwd capacity remains
                nxt[lo] |= (self.cap_fwd[axis] > 0) & frontier[hi]
                nxt[hi] |= (self.cap_bwd[axis] > 0) & frontier[lo]
            nxt &= dist == self.dead
            dist[nxt] = level
            frontier = nxt
        return dist

    def _push(self) -> None:
        active = (self.excess > 0) & (self.height < self.dead)
        # drain into the sink first
        elig = active & (self.height == 1) & (self.cap_sink > 0)
        if elig.any():
            amt = np.where(elig, np.minimum(self.excess, self.cap_sink), 0.0)
            self.excess -= amt
            self.cap_sink -= amt
            self.absorbed += float(amt.sum())
        for axis in _AXES:
            lo, hi = _lohi(axis)
            h_lo = self.height[lo]
            h_hi = self.height[hi]
            # lo -> hi
            elig = (self.excess[lo] > 0) & (h_lo < self.dead) & (h_lo == h_hi + 1) & (self.cap_fwd[axis] > 0)
            if elig.any():
                amt = np.where(elig, np.minimum(self.excess[lo], self.cap_fwd[axis]), 0.0)
                self.excess[lo] -= amt
                self.excess[hi] += amt
                self.cap_fwd[axis] -= amt
                self.cap_bwd[axis] += amt
            # hi -> lo
            elig = (self.excess[hi] > 0) & (h_hi < self.dead) & (h_hi == h_lo + 1) & (self.cap_bwd[axis] > 0)
            if elig.any():
                amt = np.where(elig, np.minimum(self.excess[hi], self.cap_bwd[axis]), 0.0)
                self.excess[hi] -= amt
                self.excess[lo] += amt
                self.cap_bwd[axis] -= amt
                self.cap_fwd[axis] += amt

    def _relabel(self) -> None:
        active = (self.excess > 0) & (self.height < self.dead)
        if not active.any():
            return
        floor = np.full(self.shape, self.dead, dtype=np.int64)
        np.minimum(floor, np.where(self.cap_sink > 0, 0, self.dead), out=floor)
        for axis in _AXES:
            lo, hi = _lohi(axis)
            np.minimum(floor[lo], np.where(self.cap_fwd[axis] > 0, self.height[hi], self.dead), out=floor[lo])
            np.minimum(floor[hi], np.where(self.cap_bwd[axis] > 0, self.height[lo], self.dead), out=floor[hi])
        new_h = np.minimum(floor + 1, self.dead)
        self.height[active] = np.maximum(self.height[active], new_h[active])

    def solve(self, relabel_every: int = 25, max_iters: int | None = None) -> np.ndarray:
        """Run to a maximum preflow and return the foreground (source-side) mask."""
        if max_iters is None:
            max_iters = 100 * self.n + 1000
        self.height = self._sink_distances()
        for it in range(max_iters):
            if not ((self.excess > 0) & (self.height < self.dead)).any():
                break
            self._push()
            if (it + 1) % relabel_every == 0:
                self.height = np.maximum(self.height, self._sink_distances())
            else:
                self._relabel()
        else:
            raise RuntimeError("max-flow failed to converge (iteration guard hit)")
        # Min cut: voxels that can still reach the sink take label 0.
        return self._sink_distances() >= self.dead

    @property
    def flow_into_sink(self) -> float:
        return self.absorbed


def graphcut_refine(
    prob: ProbMap,
    v: Volume,
    scribbles: ScribbleSet | None = None,
    cfg: GraphCutConfig = GraphCutConfig(),
    *,
    return_flow: bool = False,
):
    """Globally optimal binary labeling; scribbles become hard constraints."""
    if prob.dims != v.dims:
        raise ValidationError("probability map dims do not match volume dims")
    if scribbles is not None and scribbles.dims != v.dims:
        raise ValidationError("scribble dims do not match volume dims")
    u0, u1 = _unaries(prob, cfg)
    pair = _pairwise(v, cfg)

    big = float(u0.sum() + u1.sum() + sum(w.sum() for w in pair) + 10.0)
    if scribbles is not None and len(scribbles):
        fg = np.fromiter(scribbles.foreground, dtype=np.int64) if scribbles.foreground else None
        bg = np.fromiter(scribbles.background, dtype=np.int64) if scribbles.background else None
        if fg is not None:
            u0[fg] = big  # labeling a foreground scribble 0 is never optimal
        if bg is not None:
            u1[bg] = big

    nx, ny, nz = v.dims
    shape = (nz, ny, nx)
    bound = np.minimum(u0, u1)
    constant = float(bound.sum())
    excess = (u0 - bound).reshape(shape)
    cap_sink = (u1 - bound).reshape(shape)
    solver = _GridMaxFlow([w.copy() for w in pair], [w.copy() for w in pair], excess, cap_sink)
    fg_mask = solver.solve()
    labels = LabelMap(v.dims, fg_mask.reshape(-1).astype(np.uint8))
    if return_flow:
        return labels, constant + solver.flow_into_sink
    return labels
