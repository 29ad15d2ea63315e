"""Phone LMs and the finite-state search spaces built from them.

All graphs share one representation, :class:`SearchGraph`: an arc list with
per-arc output labels, a start state, and per-state final weights.  Each arc
consumes one output frame.  Denominator and decoding graphs are cyclic;
numerator graphs are acyclic once unrolled over the utterance's frames.

The HMM topology is fixed: every phone state has a self-loop and a forward
transition, both with probability 0.5, and the phone LM score is paid when
entering the first state of the next phone.
"""

from __future__ import annotations

import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (AlignmentMismatch, EmptyCorpus, MalformedLattice,
                     NoPathOfLengthT)
from .lattice import NEG_INF, Arc, Lattice

LOG_HALF = math.log(0.5)
BOS = 0


@dataclass(frozen=True)
class PhoneSet:
    num_phones: int
    states_per_phone: int = 1

    def __post_init__(self):
        if self.num_phones < 1 or self.states_per_phone not in (1, 2):
            raise ValueError("need >= 1 phone and 1 or 2 states per phone")

    @property
    def phones(self) -> range:
        return range(1, self.num_phones + 1)

    @property
    def num_units(self) -> int:
        return self.num_phones * self.states_per_phone

    def unit(self, phone: int, state: int = 0) -> int:
        return (phone - 1) * self.states_per_phone + state + 1

    def units_of(self, phone: int) -> list[int]:
        return [self.unit(phone, j) for j in range(self.states_per_phone)]

    def phone_of(self, unit) -> int:
        return (np.asarray(unit) - 1) // self.states_per_phone + 1


class PhoneNgramLM:
    """Interpolated add-k phone n-gram.

    For a history h of length m-1 and next event e (a phone or end of
    sentence)::

        P_m(e | h) = (c(h, e) + k V P_{m-1}(e | h')) / (c(h) + k V)

    with h' the history minus its oldest token, V the event vocabulary size
    and P_0 uniform.  The term ``k V / (c(h) + k V)`` is the backoff mass of
    h.  Histories are left-padded with ``order - 1`` sentence-start tokens.
    """

    def __init__(self, num_phones: int, order: int, k: float = 0.1):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.num_phones = num_phones
        self.order = order
        self.k = k
        self.eos = num_phones + 1
        self.vocab = num_phones + 1
        # counts[m][history] -> Counter(event -> count), history length m - 1
        self.counts = [defaultdict(Counter) for _ in range(order + 1)]
        self._cache: dict = {}

    def _event_index(self, e: int) -> int:
        return e - 1

    def add_sentence(self, phones: Sequence[int]) -> None:
        seq = [BOS] * (self.order - 1) + list(phones) + [self.eos]
        for i in range(self.order - 1, len(seq)):
            e = seq[i]
            full = tuple(seq[i - self.order + 1:i])
            for m in range(1, self.order + 1):
                h = full[len(full) - (m - 1):] if m > 1 else ()
                self.counts[m][h][e] += 1
        self._cache.clear()

    def _dist(self, history: tuple) -> np.ndarray:
        history = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        if history in self._cache:
            return self._cache[history]
        m = len(history) + 1
        if m == 1:
            lower = np.full(self.vocab, 1.0 / self.vocab)
        else:
            lower = self._dist(history[1:])
        c = self.counts[m].get(history, Counter())
        cv = np.zeros(self.vocab)
        for e, n in c.items():
            cv[self._event_index(e)] = n
        kv = self.k * self.vocab
        dist = (cv + kv * lower) / (cv.sum() + kv)
        self._cache[history] = dist
        return dist

    def prob(self, history: Sequence[int], event: int) -> float:
        return float(self._dist(tuple(history))[self._event_index(event)])

    def logprob(self, history: Sequence[int], event: int) -> float:
        return math.log(self.prob(history, event))

    def distribution(self, history: Sequence[int]) -> np.ndarray:
        """P(e | history) for e = 1..P followed by end of sentence."""
        return self._dist(tuple(history)).copy()

    def backoff_mass(self, history: Sequence[int]) -> float:
        history = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        c = self.counts[len(history) + 1].get(history, Counter())
        kv = self.k * self.vocab
        return kv / (sum(c.values()) + kv)

    def discounted(self, history: Sequence[int]) -> np.ndarray:
        history = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        c = self.counts[len(history) + 1].get(history, Counter())
        cv = np.zeros(self.vocab)
        for e, n in c.items():
            cv[self._event_index(e)] = n
        return cv / (cv.sum() + self.k * self.vocab)

    def seen_histories(self) -> list[tuple]:
        return sorted(self.counts[self.order].keys())

    @property
    def start_context(self) -> tuple:
        return (BOS,) * (self.order - 1)

    def advance(self, context: tuple, phone: int) -> tuple:
        if self.order == 1:
            return ()
        return (tuple(context) + (phone,))[-(self.order - 1):]


def estimate_phone_lm(transcripts, order: int = 3, num_phones: int | None = None,
                      k: float = 0.1) -> PhoneNgramLM:
    transcripts = [list(t) for t in transcripts]
    if not transcripts:
        raise EmptyCorpus("no transcripts to estimate a phone LM from")
    if num_phones is None:
        num_phones = max((max(t) for t in transcripts if t), default=1)
    lm = PhoneNgramLM(num_phones, order, k)
    for t in transcripts:
        lm.add_sentence(t)
    return lm


# ---------------------------------------------------------------------------


class SearchGraph:
    """Arc-labelled finite-state graph; each arc consumes one frame."""

    KINDS = ("Denominator", "Numerator", "Decode")

    def __init__(self, kind, num_states, src, dst, label, weight, final,
                 start=0, arc_frames=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown graph kind {kind!r}")
        self.kind = kind
        self.num_states = int(num_states)
        self.start = int(start)
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.label = np.asarray(label, dtype=np.int64)
        self.weight = np.asarray(weight, dtype=np.float64)
        self.final = np.asarray(final, dtype=np.float64)
        # set for lattice-derived numerators: the frame each arc must occupy
        self.arc_frames = None if arc_frames is None else np.asarray(arc_frames, dtype=np.int64)
        self._groups = {}

    @property
    def num_arcs(self) -> int:
        return int(self.src.shape[0])

    def segments(self, by: str):
        """Arc order grouped by ``"dst"`` or ``"src"``: (order, starts, ids)."""
        if by not in self._groups:
            keys = self.dst if by == "dst" else self.src
            order = np.argsort(keys, kind="stable")
            ks = keys[order]
            starts = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]]) if len(ks) else np.zeros(0, np.int64)
            self._groups[by] = (order, starts, ks[starts])
        return self._groups[by]

    def retag(self, kind: str) -> "SearchGraph":
        return SearchGraph(kind, self.num_states, self.src, self.dst, self.label,
                           self.weight, self.final, self.start, self.arc_frames)

    def reachable(self) -> np.ndarray:
        seen = np.zeros(self.num_states, dtype=bool)
        seen[self.start] = True
        while True:
            nxt = seen.copy()
            nxt[self.dst[seen[self.src]]] = True
            if (nxt == seen).all():
                return seen
            seen = nxt

    def coreachable(self) -> np.ndarray:
        seen = np.isfinite(self.final)
        while True:
            nxt = seen.copy()
            nxt[self.src[seen[self.dst]]] = True
            if (nxt == seen).all():
                return seen
            seen = nxt

    def arc_tuples(self) -> list[tuple]:
        return sorted(zip(self.src.tolist(), self.dst.tolist(),
                          self.label.tolist(), self.weight.tolist()))

    def __repr__(self):
        return f"SearchGraph({self.kind}, states={self.num_states}, arcs={self.num_arcs})"


def _compile_lm_graph(lm: PhoneNgramLM, phones: PhoneSet, kind: str) -> SearchGraph:
    spp = phones.states_per_phone
    ids = {"start": 0}
    keys = ["start"]
    arcs = []
    finals = {}

    def state_id(key):
        if key not in ids:
            ids[key] = len(keys)
            keys.append(key)
        return ids[key]

    def enter(src, ctx):
        dist = lm.distribution(ctx)
        base = 0.0 if src == 0 else LOG_HALF
        for q in phones.phones:
            d = state_id((lm.advance(ctx, q), q, 0))
            arcs.append((src, d, phones.unit(q, 0), base + math.log(dist[q - 1])))

    enter(0, lm.start_context)
    i = 1
    while i < len(keys):
        ctx, p, j = keys[i]
        arcs.append((i, i, phones.unit(p, j), LOG_HALF))
        if j < spp - 1:
            d = state_id((ctx, p, j + 1))
            arcs.append((i, d, phones.unit(p, j + 1), LOG_HALF))
        else:
            finals[i] = LOG_HALF + lm.logprob(ctx, lm.eos)
            enter(i, ctx)
        i += 1
    final = np.full(len(keys), NEG_INF)
    for s, w in finals.items():
        final[s] = w
    src, dst, lab, w = zip(*arcs)
    return SearchGraph(kind, len(keys), src, dst, lab, w, final, start=0)


def compile_denominator(lm: PhoneNgramLM, phones: PhoneSet) -> SearchGraph:
    """Phone-LM x HMM graph; the initial state is the LM start context."""
    return _compile_lm_graph(lm, phones, "Denominator")


def compile_decoding_graph(lm: PhoneNgramLM, phones: PhoneSet) -> SearchGraph:
    return _compile_lm_graph(lm, phones, "Decode")


def unroll(graph: SearchGraph, num_frames: int) -> Lattice:
    """Time-indexed expansion keeping only states on complete T-frame paths.

    Final weights are folded into the graph weights of the last-frame arcs,
    which all enter one merged final state.
    """
    T = int(num_frames)
    if T < 1:
        raise ValueError("num_frames must be >= 1")
    S = graph.num_states
    fwd = np.zeros((T + 1, S), dtype=bool)
    fwd[0, graph.start] = True
    for t in range(T):
        fwd[t + 1, graph.dst[fwd[t, graph.src]]] = True
    bwd = np.zeros((T + 1, S), dtype=bool)
    bwd[T] = np.isfinite(graph.final)
    for t in range(T - 1, -1, -1):
        bwd[t, graph.src[bwd[t + 1, graph.dst]]] = True
    live = fwd & bwd
    if not live[0, graph.start]:
        raise NoPathOfLengthT(f"graph admits no complete path of {T} frames")
    ids = {}
    nxt = 0
    for t in range(T):
        for g in np.flatnonzero(live[t]):
            ids[(t, int(g))] = nxt
            nxt += 1
    final_id = nxt
    arcs = []
    for t in range(T):
        ok = live[t, graph.src] & live[t + 1, graph.dst]
        for a in np.flatnonzero(ok):
            s, d = int(graph.src[a]), int(graph.dst[a])
            w = float(graph.weight[a])
            if t == T - 1:
                arcs.append(Arc(ids[(t, s)], final_id, int(graph.label[a]), t,
                                w + float(graph.final[d]), 0.0))
            else:
                arcs.append(Arc(ids[(t, s)], ids[(t + 1, d)], int(graph.label[a]), t, w, 0.0))
    return Lattice(final_id + 1, arcs, final=final_id, num_frames=T)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameMask:
    allowed: tuple  # allowed[f] is a frozenset of unit ids

    def __post_init__(self):
        for f, s in enumerate(self.allowed):
            if not s:
                raise ValueError(f"frame {f} has an empty allowed set")

    @property
    def num_frames(self) -> int:
        return len(self.allowed)

    def dense(self, num_units: int) -> np.ndarray:
        """Frames x num_units boolean matrix; column u-1 is unit u."""
        out = np.zeros((self.num_frames, num_units), dtype=bool)
        for f, s in enumerate(self.allowed):
            out[f, [u - 1 for u in s]] = True
        return out

    def to_text(self) -> str:
        return "".join(f"{f}: {','.join(str(u) for u in sorted(s))}\n"
                       for f, s in enumerate(self.allowed))

    @classmethod
    def from_text(cls, text: str) -> "FrameMask":
        rows = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            f, ids = line.split(":", 1)
            rows[int(f)] = frozenset(int(u) for u in ids.split(",") if u.strip())
        return cls(tuple(rows[f] for f in range(len(rows))))


def alignment_segments(alignment: Sequence[int]) -> list[tuple[int, int, int]]:
    """Runs of identical ids as (id, first frame, last frame)."""
    segs = []
    for f, p in enumerate(alignment):
        p = int(p)
        if segs and segs[-1][0] == p:
            segs[-1][2] = f
        else:
            segs.append([p, f, f])
    return [tuple(s) for s in segs]


def _linear_graph(transcript, phones: PhoneSet, lm: PhoneNgramLM | None = None) -> SearchGraph:
    """Left-to-right graph for one phone sequence.

    With ``lm`` the phone-entry and exit arcs carry the same LM scores as
    the denominator graph, so every path here is a denominator path of equal
    weight; without it only the HMM transition scores are used.
    """
    spp = phones.states_per_phone
    n = len(transcript) * spp
    ctxs = []
    if lm is not None:
        ctx = lm.start_context
        for p in transcript:
            ctxs.append(ctx)
            ctx = lm.advance(ctx, p)
        ctxs.append(ctx)

    def entry(k):
        # score of entering the k-th phone of the transcript
        if lm is None:
            return 0.0 if k == 0 else LOG_HALF
        base = 0.0 if k == 0 else LOG_HALF
        return base + lm.logprob(ctxs[k], transcript[k])

    src, dst, lab, w = [0], [1], [phones.unit(transcript[0], 0)], [entry(0)]
    for i in range(n):
        p, j = transcript[i // spp], i % spp
        s = i + 1
        src.append(s); dst.append(s); lab.append(phones.unit(p, j)); w.append(LOG_HALF)
        if i + 1 < n:
            q, k = transcript[(i + 1) // spp], (i + 1) % spp
            src.append(s); dst.append(s + 1); lab.append(phones.unit(q, k))
            w.append(entry((i + 1) // spp) if k == 0 else LOG_HALF)
    final = np.full(n + 1, NEG_INF)
    final[n] = LOG_HALF + (lm.logprob(ctxs[-1], lm.eos) if lm is not None else 0.0)
    return SearchGraph("Numerator", n + 1, src, dst, lab, w, final, start=0)


def numerator_from_transcript(transcript, alignment, phones: PhoneSet,
                              tolerance: int = 2, num_frames: int | None = None,
                              lm: PhoneNgramLM | None = None):
    """Linear supervision graph plus a tolerance mask around the alignment.

    ``alignment`` gives the phone id of every output frame; its runs must
    spell out ``transcript``.  Pass the denominator's ``lm`` to make the
    graph weights match the denominator path weights.
    """
    transcript = [int(p) for p in transcript]
    T = len(alignment)
    if num_frames is not None and T != num_frames:
        raise AlignmentMismatch(f"alignment has {T} frames, expected {num_frames}")
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    segs = alignment_segments(alignment)
    if [s[0] for s in segs] != transcript:
        raise AlignmentMismatch("alignment runs do not match the transcript")
    allowed = [set() for _ in range(T)]
    for p, a, b in segs:
        for f in range(max(0, a - tolerance), min(T - 1, b + tolerance) + 1):
            allowed[f].update(phones.units_of(p))
    mask = FrameMask(tuple(frozenset(s) for s in allowed))
    return _linear_graph(transcript, phones, lm), mask


def numerator_from_lattice(lat: Lattice, tolerance: int = 2):
    """Use a (pruned) lattice as supervision; acoustic scores are dropped."""
    if not isinstance(lat, Lattice):
        raise MalformedLattice("expected a Lattice")
    final = np.full(lat.num_states, NEG_INF)
    final[lat.final] = 0.0
    graph = SearchGraph("Numerator", lat.num_states, lat.src, lat.dst, lat.label,
                        lat.graph_weight, final, start=lat.start, arc_frames=lat.frame)
    T = lat.num_frames
    per_frame = [set() for _ in range(T)]
    for f, u in zip(lat.frame.tolist(), lat.label.tolist()):
        per_frame[f].add(u)
    allowed = []
    for f in range(T):
        s = set()
        for g in range(max(0, f - tolerance), min(T - 1, f + tolerance) + 1):
            s |= per_frame[g]
        allowed.append(frozenset(s))
    return graph, FrameMask(tuple(allowed))


# ---------------------------------------------------------------------------
# Text format: same arc lines as lattices, plus kind/start/final headers.


def write_graph(graph: SearchGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"kind {graph.kind}\n")
        fh.write(f"numstates {graph.num_states}\n")
        fh.write(f"start {graph.start}\n")
        frames = graph.arc_frames if graph.arc_frames is not None else np.full(graph.num_arcs, -1)
        for s, d, lab, f, w in zip(graph.src.tolist(), graph.dst.tolist(),
                                   graph.label.tolist(), frames.tolist(),
                                   graph.weight.tolist()):
            fh.write(f"{s} {d} {lab} {f} {format(w, '.17g')} 0\n")
        for s in np.flatnonzero(np.isfinite(graph.final)):
            fh.write(f"final {s} {format(float(graph.final[s]), '.17g')}\n")


def read_graph(path) -> SearchGraph:
    kind, n, start = None, None, 0
    src, dst, lab, frm, w, finals = [], [], [], [], [], {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "kind":
                kind = parts[1]
            elif parts[0] == "numstates":
                n = int(parts[1])
            elif parts[0] == "start":
                start = int(parts[1])
            elif parts[0] == "final":
                finals[int(parts[1])] = float(parts[2])
            else:
                src.append(int(parts[0])); dst.append(int(parts[1]))
                lab.append(int(parts[2])); frm.append(int(parts[3]))
                w.append(float(parts[4]))
    if kind is None or n is None:
        raise MalformedLattice(f"{os.fspath(path)}: missing kind or numstates header")
    final = np.full(n, NEG_INF)
    for s, v in finals.items():
        final[s] = v
    frames = np.asarray(frm) if frm and min(frm) >= 0 else None
    return SearchGraph(kind, n, src, dst, lab, w, final, start=start, arc_frames=frames)
