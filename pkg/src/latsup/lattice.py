"""Acyclic, time-synchronous weighted lattices.

Weights are natural-log scores.  Every arc carries two of them, a graph
score (LM + transitions) and an acoustic score, and the two are summed
whenever a path weight is needed.  Keeping them apart lets adaptation
replace the acoustic term without re-decoding.

Lattices are time-synchronous: each arc consumes exactly one output frame
and an arc's ``frame`` equals the depth of its source state, so every
start-to-final path has ``num_frames`` arcs.
"""

from __future__ import annotations

import io
import math
import os
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import CycleDetected, MalformedLattice

NEG_INF = float("-inf")

# Slack used when comparing path scores against a pruning threshold.
_PRUNE_SLACK = 1e-9


def log_add(a: float, b: float) -> float:
    """Return ln(e^a + e^b) without overflow; -inf is the additive identity."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


class Arc(NamedTuple):
    src: int
    dst: int
    label: int
    frame: int
    graph_weight: float
    acoustic_weight: float


class Lattice:
    """Immutable arc-list lattice with a single start and a single final state.

    Construction validates the structural invariants unless ``check=False``;
    unchecked lattices exist only so that malformed inputs can be handed to
    :func:`topo_order` and friends in tests.
    """

    def __init__(self, num_states, arcs, final, num_frames, start=0, check=True):
        arcs = list(arcs)
        self.num_states = int(num_states)
        self.start = int(start)
        self.final = int(final)
        self.num_frames = int(num_frames)
        if arcs:
            cols = list(zip(*arcs))
        else:
            cols = [()] * 6
        self.src = np.asarray(cols[0], dtype=np.int64)
        self.dst = np.asarray(cols[1], dtype=np.int64)
        self.label = np.asarray(cols[2], dtype=np.int64)
        self.frame = np.asarray(cols[3], dtype=np.int64)
        self.graph_weight = np.asarray(cols[4], dtype=np.float64)
        self.acoustic_weight = np.asarray(cols[5], dtype=np.float64)
        self._freeze()
        if check:
            self._validate()

    @classmethod
    def from_arrays(cls, num_states, src, dst, label, frame, graph_weight,
                    acoustic_weight, final, num_frames, start=0, check=True):
        lat = cls.__new__(cls)
        lat.num_states = int(num_states)
        lat.start = int(start)
        lat.final = int(final)
        lat.num_frames = int(num_frames)
        lat.src = np.array(src, dtype=np.int64)
        lat.dst = np.array(dst, dtype=np.int64)
        lat.label = np.array(label, dtype=np.int64)
        lat.frame = np.array(frame, dtype=np.int64)
        lat.graph_weight = np.array(graph_weight, dtype=np.float64)
        lat.acoustic_weight = np.array(acoustic_weight, dtype=np.float64)
        lat._freeze()
        if check:
            lat._validate()
        return lat

    def _freeze(self):
        for a in (self.src, self.dst, self.label, self.frame,
                  self.graph_weight, self.acoustic_weight):
            a.flags.writeable = False

    def _validate(self):
        n = self.num_states
        if not (0 <= self.start < n and 0 <= self.final < n):
            raise MalformedLattice("start or final state missing")
        sizes = {a.shape for a in (self.src, self.dst, self.label, self.frame,
                                   self.graph_weight, self.acoustic_weight)}
        if len(sizes) != 1:
            raise MalformedLattice("arc field arrays differ in length")
        if self.num_arcs and (self.src.min() < 0 or self.dst.min() < 0
                              or max(self.src.max(), self.dst.max()) >= n):
            raise MalformedLattice("arc references unknown state")
        if self.num_arcs and self.label.min() < 1:
            raise MalformedLattice("epsilon or negative label in lattice")
        if np.isnan(self.graph_weight).any() or np.isnan(self.acoustic_weight).any():
            raise MalformedLattice("NaN weight")
        order = topo_order(self)
        indeg = np.bincount(self.dst, minlength=n)
        outdeg = np.bincount(self.src, minlength=n)
        sources = np.flatnonzero(indeg == 0)
        sinks = np.flatnonzero(outdeg == 0)
        if list(sources) != [self.start] or list(sinks) != [self.final]:
            raise MalformedLattice(
                f"expected unique start {self.start} and final {self.final}, "
                f"got sources {list(sources)} and sinks {list(sinks)}")
        depth = np.full(n, -1, dtype=np.int64)
        depth[self.start] = 0
        by_src = _csr(self.src, n)
        for s in order:
            for a in by_src[s]:
                if self.frame[a] != depth[s]:
                    raise MalformedLattice(
                        f"arc {a} has frame {self.frame[a]} but source depth {depth[s]}")
                d = self.dst[a]
                if depth[d] == -1:
                    depth[d] = depth[s] + 1
                elif depth[d] != depth[s] + 1:
                    raise MalformedLattice("lattice is not time-synchronous")
        if depth[self.final] != self.num_frames:
            raise MalformedLattice(
                f"paths span {depth[self.final]} frames, header says {self.num_frames}")

    @property
    def num_arcs(self) -> int:
        return int(self.src.shape[0])

    @property
    def weight(self) -> np.ndarray:
        return self.graph_weight + self.acoustic_weight

    def arcs(self) -> Iterator[Arc]:
        for i in range(self.num_arcs):
            yield Arc(int(self.src[i]), int(self.dst[i]), int(self.label[i]),
                      int(self.frame[i]), float(self.graph_weight[i]),
                      float(self.acoustic_weight[i]))

    def arc_tuples(self) -> list[Arc]:
        return sorted(self.arcs())

    def state_depths(self) -> np.ndarray:
        depth = np.zeros(self.num_states, dtype=np.int64)
        depth[self.dst] = self.frame + 1
        depth[self.start] = 0
        return depth

    def with_acoustic(self, acoustic_weight) -> "Lattice":
        """Copy with the acoustic term replaced; structure is unchanged."""
        return Lattice.from_arrays(
            self.num_states, self.src, self.dst, self.label, self.frame,
            self.graph_weight, acoustic_weight, self.final, self.num_frames,
            start=self.start, check=False)

    def __repr__(self):
        return (f"Lattice(states={self.num_states}, arcs={self.num_arcs}, "
                f"frames={self.num_frames})")


def _csr(keys, n):
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [order[bounds[s]:bounds[s + 1]] for s in range(n)]


def topo_order(lat: Lattice) -> list[int]:
    """Kahn's algorithm; ties resolved by smallest state id."""
    n = lat.num_states
    if not (0 <= lat.start < n and 0 <= lat.final < n):
        raise MalformedLattice("start or final state missing")
    indeg = np.bincount(lat.dst, minlength=n).astype(np.int64)
    by_src = _csr(lat.src, n)
    ready = deque(int(s) for s in np.flatnonzero(indeg == 0))
    order = []
    while ready:
        s = ready.popleft()
        order.append(s)
        for a in by_src[s]:
            d = int(lat.dst[a])
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
    if len(order) != n:
        raise CycleDetected(f"cycle among {n - len(order)} states")
    return order


def _frame_groups(lat):
    order = np.argsort(lat.frame, kind="stable")
    counts = np.bincount(lat.frame, minlength=lat.num_frames)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [order[bounds[f]:bounds[f + 1]] for f in range(lat.num_frames)]


def _forward_scores(lat, weight, reduce):
    alpha = np.full(lat.num_states, NEG_INF)
    alpha[lat.start] = 0.0
    for idx in _frame_groups(lat):
        reduce.at(alpha, lat.dst[idx], alpha[lat.src[idx]] + weight[idx])
    return alpha


def _backward_scores(lat, weight, reduce):
    beta = np.full(lat.num_states, NEG_INF)
    beta[lat.final] = 0.0
    for idx in reversed(_frame_groups(lat)):
        reduce.at(beta, lat.src[idx], beta[lat.dst[idx]] + weight[idx])
    return beta


@dataclass(frozen=True)
class PosteriorTable:
    arc_posterior: np.ndarray
    frame_marginals: list  # frame -> {label: probability}
    total_logZ: float
    alpha: np.ndarray
    beta: np.ndarray

    def dense_marginals(self, num_labels: int) -> np.ndarray:
        """Frames x (num_labels + 1) matrix; column 0 (epsilon) stays zero."""
        out = np.zeros((len(self.frame_marginals), num_labels + 1))
        for f, row in enumerate(self.frame_marginals):
            for lab, p in row.items():
                out[f, lab] = p
        return out


def forward_backward(lat: Lattice) -> PosteriorTable:
    w = lat.weight
    with np.errstate(invalid="ignore"):
        alpha = _forward_scores(lat, w, np.logaddexp)
        beta = _backward_scores(lat, w, np.logaddexp)
    logz = float(alpha[lat.final])
    if not np.isfinite(logz):
        raise MalformedLattice("lattice has no path of finite weight")
    with np.errstate(invalid="ignore", over="ignore"):
        post = np.exp(alpha[lat.src] + w + beta[lat.dst] - logz)
    post = np.nan_to_num(post, nan=0.0)
    np.clip(post, 0.0, 1.0, out=post)
    marg = [dict() for _ in range(lat.num_frames)]
    for f, lab, p in zip(lat.frame.tolist(), lat.label.tolist(), post.tolist()):
        marg[f][lab] = marg[f].get(lab, 0.0) + p
    return PosteriorTable(post, marg, logz, alpha, beta)


def best_path_arcs(lat: Lattice) -> np.ndarray:
    """Arc indices of the tropical best path, in frame order.

    Walks forward from the start, taking at each state the arc with the best
    completion score; ties go to the smallest destination state id, then the
    smallest arc index.
    """
    w = lat.weight
    beta = _backward_scores(lat, w, np.maximum)
    if not np.isfinite(beta[lat.start]):
        raise MalformedLattice("lattice has no path of finite weight")
    by_src = _csr(lat.src, lat.num_states)
    path = []
    s = lat.start
    while s != lat.final:
        cand = by_src[s]
        score = w[cand] + beta[lat.dst[cand]]
        top = score.max()
        tied = cand[score == top]
        a = tied[np.lexsort((tied, lat.dst[tied]))[0]]
        path.append(int(a))
        s = int(lat.dst[a])
    return np.asarray(path, dtype=np.int64)


def _subset(lat: Lattice, keep: np.ndarray) -> Lattice:
    """Lattice over the kept arcs, states renumbered by (depth, old id)."""
    depth = lat.state_depths()
    used = np.zeros(lat.num_states, dtype=bool)
    used[lat.src[keep]] = True
    used[lat.dst[keep]] = True
    old = np.flatnonzero(used)
    old = old[np.lexsort((old, depth[old]))]
    new_id = np.full(lat.num_states, -1, dtype=np.int64)
    new_id[old] = np.arange(len(old))
    return Lattice.from_arrays(
        len(old), new_id[lat.src[keep]], new_id[lat.dst[keep]],
        lat.label[keep], lat.frame[keep], lat.graph_weight[keep],
        lat.acoustic_weight[keep], new_id[lat.final], lat.num_frames,
        start=new_id[lat.start], check=False)


def best_path(lat: Lattice) -> Lattice:
    return _subset(lat, best_path_arcs(lat))


def best_path_weight(lat: Lattice) -> float:
    return float(lat.weight[best_path_arcs(lat)].sum())


def prune(lat: Lattice, beam: float) -> Lattice:
    """Keep the arcs lying on a path within ``beam`` of the best path.

    ``beam == 0`` returns exactly the best path.
    """
    if beam < 0:
        raise ValueError("beam must be non-negative")
    if beam == 0:
        return best_path(lat)
    w = lat.weight
    alpha = _forward_scores(lat, w, np.maximum)
    beta = _backward_scores(lat, w, np.maximum)
    best = alpha[lat.final]
    if not np.isfinite(best):
        raise MalformedLattice("lattice has no path of finite weight")
    if math.isinf(beam):
        keep = np.arange(lat.num_arcs)
    else:
        through = alpha[lat.src] + w + beta[lat.dst]
        slack = _PRUNE_SLACK * max(1.0, abs(best))
        keep = np.flatnonzero(through >= best - beam - slack)
    return _subset(lat, keep)


def utterance_confidence(lat: Lattice) -> float:
    """Mean forward-backward posterior of the best-path arcs."""
    post = forward_backward(lat).arc_posterior
    return float(post[best_path_arcs(lat)].mean())


def random_lattice(rng: np.random.Generator, num_frames: int = 4,
                   max_width: int = 3, num_labels: int = 4,
                   extra_arc_prob: float = 0.4) -> Lattice:
    """Random well-formed lattice, used by property tests and benchmarks."""
    widths = [1] + [int(rng.integers(1, max_width + 1))
                    for _ in range(num_frames - 1)] + [1]
    layers, next_id = [], 0
    for wd in widths:
        layers.append(list(range(next_id, next_id + wd)))
        next_id += wd
    arcs = []
    for f in range(num_frames):
        here, there = layers[f], layers[f + 1]
        pairs = set()
        for s in here:
            pairs.add((s, there[int(rng.integers(len(there)))]))
        for d in there:
            pairs.add((here[int(rng.integers(len(here)))], d))
        for s in here:
            for d in there:
                if rng.random() < extra_arc_prob:
                    pairs.add((s, d))
        for s, d in sorted(pairs):
            for _ in range(1 + int(rng.random() < 0.2)):
                arcs.append(Arc(s, d, int(rng.integers(1, num_labels + 1)), f,
                                float(np.log(rng.uniform(0.05, 1.0))),
                                float(rng.normal(0.0, 2.0))))
    return Lattice(next_id, arcs, final=next_id - 1, num_frames=num_frames)


# ---------------------------------------------------------------------------
# Text format


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_lattice(lat: Lattice, dest) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w") as fh:
            write_lattice(lat, fh)
        return
    dest.write(f"numframes {lat.num_frames}\n")
    for a in lat.arcs():
        dest.write(f"{a.src} {a.dst} {a.label} {a.frame} "
                   f"{_fmt(a.graph_weight)} {_fmt(a.acoustic_weight)}\n")
    dest.write(f"final {lat.final}\n")


def lattice_to_string(lat: Lattice) -> str:
    buf = io.StringIO()
    write_lattice(lat, buf)
    return buf.getvalue()


def _parse_lattice_lines(lines: Iterable[str]) -> Lattice:
    num_frames = final = None
    arcs = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "numframes":
                num_frames = int(parts[1])
            elif parts[0] == "final":
                final = int(parts[1])
            else:
                s, d, lab, f = (int(x) for x in parts[:4])
                arcs.append(Arc(s, d, lab, f, float(parts[4]), float(parts[5])))
        except (IndexError, ValueError) as exc:
            raise MalformedLattice(f"line {lineno}: cannot parse {line!r}") from exc
    if num_frames is None or final is None:
        raise MalformedLattice("missing numframes header or final line")
    n = 1 + max([final] + [max(a.src, a.dst) for a in arcs])
    indeg = np.zeros(n, dtype=np.int64)
    for a in arcs:
        indeg[a.dst] += 1
    starts = np.flatnonzero(indeg == 0)
    start = int(starts[0]) if len(starts) else 0
    return Lattice(n, arcs, final=final, num_frames=num_frames, start=start)


def read_lattice(src) -> Lattice:
    if isinstance(src, (str, os.PathLike)):
        with open(src) as fh:
            return _parse_lattice_lines(fh)
    return _parse_lattice_lines(src)


def lattice_from_string(text: str) -> Lattice:
    return _parse_lattice_lines(text.splitlines())
