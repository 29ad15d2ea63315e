"""Frame-synchronous Viterbi beam search producing time-synchronous lattices."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import LatsupError, NoSurvivingToken
from .graphs import PhoneSet, SearchGraph
from .lattice import (NEG_INF, Lattice, best_path_arcs, best_path_weight, prune,
                      read_lattice, utterance_confidence, write_lattice)
from .model import SI, AcousticModel, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodeConfig:
    beam: float = 16.0
    lattice_beam: float = 8.0
    max_active: int = 2000
    acoustic_scale: float = 1.0

    def __post_init__(self):
        if not self.beam > 0:
            raise ValueError("beam must be positive")
        if self.lattice_beam < 0 or self.lattice_beam > self.beam:
            raise ValueError("need 0 <= lattice_beam <= beam")
        if self.max_active < 1:
            raise ValueError("max_active must be >= 1")


@dataclass
class DecodeResult:
    lattice: Lattice
    transcript: list
    confidence: float
    score: float


def collapse(labels, phones: PhoneSet) -> list:
    """Phone sequence from per-frame unit labels (runs merged)."""
    out = []
    for p in phones.phone_of(np.asarray(labels)).tolist():
        if not out or out[-1] != p:
            out.append(int(p))
    return out


def _segment_max(v, segs, n):
    order, starts, ids = segs
    out = np.full(n, NEG_INF)
    if len(order):
        out[ids] = np.maximum.reduceat(v[order], starts)
    return out


def decode_scores(emissions, graph: SearchGraph, cfg: DecodeConfig,
                  phones: PhoneSet | None = None) -> DecodeResult:
    """Decode pre-computed per-frame unit scores (T x U)."""
    em = np.asarray(emissions, dtype=np.float64) * cfg.acoustic_scale
    T = em.shape[0]
    S = graph.num_states
    W = em[:, graph.label - 1] + graph.weight
    dsegs, ssegs = graph.segments("dst"), graph.segments("src")
    fwd = np.full((T + 1, S), NEG_INF)
    fwd[0, graph.start] = 0.0
    for t in range(T):
        new = _segment_max(fwd[t, graph.src] + W[t], dsegs, S)
        best = new.max()
        if not np.isfinite(best):
            raise NoSurvivingToken(f"no token survives frame {t}")
        new[new < best - cfg.beam] = NEG_INF
        alive = np.flatnonzero(np.isfinite(new))
        if len(alive) > cfg.max_active:
            cut = alive[np.argpartition(-new[alive], cfg.max_active)[cfg.max_active:]]
            new[cut] = NEG_INF
        fwd[t + 1] = new
    end = fwd[T] + graph.final
    best_total = end.max()
    if not np.isfinite(best_total):
        raise NoSurvivingToken("no surviving token reaches a final state")
    bwd = np.full((T + 1, S), NEG_INF)
    bwd[T] = np.where(np.isfinite(fwd[T]), graph.final, NEG_INF)
    for t in range(T - 1, -1, -1):
        b = _segment_max(W[t] + bwd[t + 1, graph.dst], ssegs, S)
        b[~np.isfinite(fwd[t])] = NEG_INF
        bwd[t] = b
    thresh = best_total - cfg.lattice_beam - 1e-9 * max(1.0, abs(best_total))
    ids = {}
    src, dst, lab, frm, gw, aw = [], [], [], [], [], []
    ids[(0, graph.start)] = 0
    pending = []
    for t in range(T):
        through = fwd[t, graph.src] + W[t] + bwd[t + 1, graph.dst]
        keep = np.flatnonzero(through >= thresh)
        pending.append(keep)
        for a in keep:
            if (t, int(graph.src[a])) not in ids:
                ids[(t, int(graph.src[a]))] = len(ids)
    final_id = len(ids)
    for t, keep in enumerate(pending):
        for a in keep:
            a = int(a)
            s, d = int(graph.src[a]), int(graph.dst[a])
            g = float(graph.weight[a])
            src.append(ids[(t, s)])
            if t == T - 1:
                dst.append(final_id)
                g += float(graph.final[d])
            else:
                dst.append(ids[(t + 1, d)])
            lab.append(int(graph.label[a]))
            frm.append(t)
            gw.append(g)
            aw.append(float(em[t, graph.label[a] - 1]))
    raw = Lattice.from_arrays(final_id + 1, src, dst, lab, frm, gw, aw,
                              final=final_id, num_frames=T)
    lat = prune(raw, cfg.lattice_beam)
    bp = best_path_arcs(lat)
    transcript = collapse(lat.label[bp], phones) if phones is not None else lat.label[bp].tolist()
    return DecodeResult(lat, transcript, utterance_confidence(lat), float(lat.weight[bp].sum()))


def decode_utterance(model: AcousticModel, features, graph: SearchGraph,
                     cfg: DecodeConfig, phones: PhoneSet | None = None,
                     speaker=SI) -> DecodeResult:
    if phones is None:
        phones = PhoneSet(model.cfg.num_outputs)
    return decode_scores(forward(model, features, speaker), graph, cfg, phones)


class CorpusDecode(dict):
    """utt id -> DecodeResult, plus ``failures`` (utt id -> error text)."""

    def __init__(self):
        super().__init__()
        self.failures = {}

    def error_counts(self) -> dict:
        counts = {}
        for msg in self.failures.values():
            kind = msg.split(":", 1)[0]
            counts[kind] = counts.get(kind, 0) + 1
        return counts


def decode_corpus(model, corpus, graph: SearchGraph, cfg: DecodeConfig,
                  phones: PhoneSet | None = None, speaker=SI) -> CorpusDecode:
    """Decode every utterance; ``speaker`` may be an id, None, or a callable
    mapping an utterance to the LHUC speaker (or model) to use."""
    results = CorpusDecode()
    for u in sorted(corpus, key=lambda u: u.id):
        spk, mdl = speaker, model
        if callable(speaker):
            choice = speaker(u)
            if isinstance(choice, tuple):
                mdl, spk = choice
            else:
                spk = choice
        try:
            results[u.id] = decode_utterance(mdl, u.features, graph, cfg, phones, spk)
        except LatsupError as exc:
            results.failures[u.id] = f"{type(exc).__name__}: {exc}"
            log.warning("decode failed for %s: %s", u.id, exc)
    return results


def write_decode_outputs(results: CorpusDecode, out_dir) -> None:
    """One lattice file per utterance plus a ``text`` file of transcripts."""
    os.makedirs(os.path.join(out_dir, "lat"), exist_ok=True)
    with open(os.path.join(out_dir, "text"), "w") as fh:
        for utt in sorted(results):
            r = results[utt]
            write_lattice(r.lattice, os.path.join(out_dir, "lat", f"{utt}.lat"))
            fh.write(" ".join([utt] + [str(p) for p in r.transcript]) + "\n")
    with open(os.path.join(out_dir, "confidence"), "w") as fh:
        for utt in sorted(results):
            fh.write(f"{utt} {format(results[utt].confidence, '.17g')}\n")


def read_decode_outputs(out_dir) -> CorpusDecode:
    """Inverse of write_decode_outputs (transcripts, lattices, confidences)."""
    results = CorpusDecode()
    conf = {}
    with open(os.path.join(out_dir, "confidence")) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                conf[parts[0]] = float(parts[1])
    with open(os.path.join(out_dir, "text")) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            utt = parts[0]
            lat = read_lattice(os.path.join(out_dir, "lat", f"{utt}.lat"))
            results[utt] = DecodeResult(lat, [int(p) for p in parts[1:]],
                                        conf[utt], best_path_weight(lat))
    return results
