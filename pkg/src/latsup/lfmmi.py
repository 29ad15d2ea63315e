"""LF-MMI objective, its output-layer gradient, and seed-model training.

The objective for one utterance is ``log p(O | num) - log p(O | den)``
where both terms are frame-synchronous forward passes over a graph, with
the network's raw output for unit ``u`` at frame ``t`` used as the score of
every arc labelled ``u`` at that frame.  Its gradient with respect to the
outputs is the difference of per-frame unit occupancies.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import Diverged, NoAlignment, NumeratorEmpty
from .graphs import FrameMask, PhoneSet, SearchGraph, numerator_from_transcript, _linear_graph
from .lattice import NEG_INF
from .model import (ALL, SI, AcousticModel, LrSchedule, ParamSelector, backward,
                    forward, lr_at, sat_lhuc_pass_selector, sgd_step)

log = logging.getLogger(__name__)


def _segment_logsumexp(v, segs, num_states):
    order, starts, ids = segs
    out = np.full(num_states, NEG_INF)
    if not len(order):
        return out
    vs = v[order]
    m = np.maximum.reduceat(vs, starts)
    mrep = np.repeat(m, np.diff(np.r_[starts, len(vs)]))
    with np.errstate(invalid="ignore", divide="ignore"):
        e = np.exp(np.where(np.isfinite(mrep), vs - mrep, NEG_INF))
        out[ids] = m + np.log(np.add.reduceat(e, starts))
    out[np.isnan(out)] = NEG_INF
    return out


def _arc_scores(graph: SearchGraph, emissions, mask):
    """T x A total arc weights (graph weight + emission), masked arcs at -inf."""
    em = np.asarray(emissions, dtype=np.float64)
    lab = graph.label - 1
    w = em[:, lab] + graph.weight
    if mask is not None:
        dense = mask.dense(em.shape[1]) if isinstance(mask, FrameMask) else np.asarray(mask, bool)
        if dense.shape[0] != em.shape[0]:
            raise ValueError(f"mask spans {dense.shape[0]} frames, outputs {em.shape[0]}")
        w = np.where(dense[:, lab], w, NEG_INF)
    if graph.arc_frames is not None:
        w = np.where(np.arange(em.shape[0])[:, None] == graph.arc_frames[None, :], w, NEG_INF)
    return w


def graph_forward_backward(graph: SearchGraph, emissions, mask=None):
    """Return (logZ, gamma) with gamma[t, u-1] the occupancy of unit u at t.

    gamma is all zeros when the graph has no admissible path (logZ = -inf).
    """
    W = _arc_scores(graph, emissions, mask)
    T, U = np.shape(emissions)
    S = graph.num_states
    dsegs, ssegs = graph.segments("dst"), graph.segments("src")
    alpha = np.full((T + 1, S), NEG_INF)
    alpha[0, graph.start] = 0.0
    for t in range(T):
        alpha[t + 1] = _segment_logsumexp(alpha[t, graph.src] + W[t], dsegs, S)
    with np.errstate(invalid="ignore"):
        logz = float(np.logaddexp.reduce(alpha[T] + graph.final))
    gamma = np.zeros((T, U))
    if not np.isfinite(logz):
        return NEG_INF, gamma
    beta = np.full((T + 1, S), NEG_INF)
    beta[T] = graph.final
    for t in range(T - 1, -1, -1):
        beta[t] = _segment_logsumexp(W[t] + beta[t + 1, graph.dst], ssegs, S)
    with np.errstate(invalid="ignore", over="ignore"):
        post = np.exp(alpha[:T, graph.src] + W + beta[1:, graph.dst] - logz)
    post = np.nan_to_num(post, nan=0.0)
    onehot = np.zeros((graph.num_arcs, U))
    onehot[np.arange(graph.num_arcs), graph.label - 1] = 1.0
    gamma = post @ onehot
    return logz, gamma


def graph_viterbi(graph: SearchGraph, emissions, mask=None):
    """Best complete path: (score, arc indices in frame order)."""
    W = _arc_scores(graph, emissions, mask)
    T = W.shape[0]
    S = graph.num_states
    order, starts, ids = graph.segments("dst")
    alpha = np.full(S, NEG_INF)
    alpha[graph.start] = 0.0
    back = np.full((T, S), -1, dtype=np.int64)
    pos = np.arange(len(order))
    for t in range(T):
        v = (alpha[graph.src] + W[t])[order]
        m = np.maximum.reduceat(v, starts)
        mrep = np.repeat(m, np.diff(np.r_[starts, len(v)]))
        first = np.minimum.reduceat(np.where(v == mrep, pos, len(v)), starts)
        alpha = np.full(S, NEG_INF)
        alpha[ids] = m
        ok = np.isfinite(m)
        back[t, ids[ok]] = order[first[ok]]
    total = alpha + graph.final
    end = int(np.argmax(total))
    score = float(total[end])
    if not np.isfinite(score):
        return NEG_INF, np.zeros(0, dtype=np.int64)
    arcs = np.empty(T, dtype=np.int64)
    s = end
    for t in range(T - 1, -1, -1):
        a = back[t, s]
        arcs[t] = a
        s = graph.src[a]
    return score, arcs


@dataclass
class MmiLoss:
    num_logz: float
    den_logz: float

    @property
    def objective(self) -> float:
        return self.num_logz - self.den_logz


def mmi_loss_and_grad(outputs, num, den: SearchGraph, acoustic_scale: float = 1.0):
    """Objective terms and d(objective)/d(outputs) = scale * (gamma_num - gamma_den).

    ``num`` is a (graph, mask) pair; mask may be None.
    """
    num_graph, mask = num
    em = np.asarray(outputs, dtype=np.float64) * acoustic_scale
    num_logz, g_num = graph_forward_backward(num_graph, em, mask)
    if not np.isfinite(num_logz):
        raise NumeratorEmpty("frame mask leaves no numerator path")
    den_logz, g_den = graph_forward_backward(den, em)
    if not np.isfinite(den_logz):
        raise NumeratorEmpty("denominator graph admits no path of this length")
    return MmiLoss(num_logz, den_logz), acoustic_scale * (g_num - g_den)


def output_alignment(model: AcousticModel, alignment) -> np.ndarray:
    """Sample an input-rate alignment at the model's output frame centres."""
    a = np.asarray(alignment)
    return a[model.output_positions(len(a))]


@dataclass
class TrainItem:
    utt_id: str
    speaker: str
    features: np.ndarray
    num: tuple  # (SearchGraph, FrameMask)


def transcript_items(model: AcousticModel, utterances, phones: PhoneSet,
                     tolerance: int = 2, lm=None) -> list[TrainItem]:
    """Supervision from each utterance's generative alignment."""
    items = []
    for u in utterances:
        ali = output_alignment(model, u.alignment)
        graph, mask = numerator_from_transcript(u.transcript, ali, phones, tolerance, lm=lm)
        items.append(TrainItem(u.id, u.speaker, u.features, (graph, mask)))
    return items


def utterance_step(model, item, den, selector, speaker, acoustic_scale=1.0):
    """Loss and per-frame-normalised parameter gradients for one utterance."""
    out, cache = forward(model, item.features, speaker, return_cache=True)
    loss, gout = mmi_loss_and_grad(out, item.num, den, acoustic_scale)
    # backward() differentiates sum(grad_out * outputs); we ascend the
    # objective, so hand it the negated, frame-averaged occupancy difference.
    grads = backward(model, item.features, speaker, -gout / out.shape[0], selector, cache)
    return loss, grads


def num_steps(num_items: int, batch_size: int = 1) -> int:
    """SGD steps per epoch for ``num_items`` utterances."""
    return max(1, math.ceil(num_items / batch_size))


def train(model: AcousticModel, items: Sequence[TrainItem], den: SearchGraph,
          schedule: LrSchedule, l2: float = 0.0, epochs: int | None = None,
          rng=None, sat_lhuc: bool = False, sat_p: float = 0.5,
          selector: ParamSelector | None = None, speaker=SI,
          acoustic_scale: float = 1.0, shuffle: bool = True,
          max_change: float | None = None, skip_empty: bool = False,
          batch_size: int = 1):
    """Minibatch SGD on the MMI objective.  Updates ``model`` in place.

    Each step averages the frame-normalised gradients of ``batch_size``
    utterances; the schedule is indexed by step, so build it with
    ``num_steps(len(items), batch_size)`` iterations per epoch.
    ``speaker`` is the LHUC speaker used for every utterance unless
    ``sat_lhuc`` is set, in which case each minibatch trains either the SI
    vectors or the utterance speakers' own vectors.  ``max_change`` caps the
    norm of each tensor's per-step update.  With ``skip_empty`` an
    utterance whose numerator admits no path is skipped and counted in the
    row's ``skipped`` field instead of raising.

    Returns ``(model, trace)`` where trace rows are dicts with epoch, utts,
    num_logZ, den_logZ and objective (sums over the epoch's utterances),
    plus ``max_term``, the largest single-utterance objective of the epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    epochs = schedule.epochs if epochs is None else epochs
    if selector is None:
        selector = ParamSelector(ALL, include_si=sat_lhuc)
    trace = []
    it = 0
    n_iter = schedule.num_iterations
    for epoch in range(epochs):
        order = rng.permutation(len(items)) if shuffle else np.arange(len(items))
        num_sum = den_sum = 0.0
        max_term = -math.inf
        skipped = 0
        for b in range(0, len(order), batch_size):
            use_si = sat_lhuc and sat_lhuc_pass_selector(rng, sat_p) == "SI"
            total, count = {}, 0
            for i in order[b:b + batch_size]:
                item = items[i]
                spk = speaker
                if sat_lhuc:
                    spk = SI if use_si else item.speaker
                    if spk not in model.lhuc:
                        model.add_speaker(spk, rng)
                try:
                    loss, grads = utterance_step(model, item, den, selector, spk, acoustic_scale)
                except NumeratorEmpty:
                    if not skip_empty:
                        raise
                    skipped += 1
                    continue
                if not math.isfinite(loss.objective):
                    raise Diverged(f"objective became {loss.objective} at epoch {epoch}")
                for name, g in grads.items():
                    total[name] = total[name] + g if name in total else g
                num_sum += loss.num_logz
                den_sum += loss.den_logz
                max_term = max(max_term, loss.objective)
                count += 1
            if count:
                lr = lr_at(schedule, min(it, n_iter - 1))
                sgd_step(model, {n: g / count for n, g in total.items()},
                         selector, lr, l2, max_change)
            it += 1
        row = {"epoch": epoch, "utts": len(items) - skipped, "num_logZ": num_sum,
               "den_logZ": den_sum, "objective": num_sum - den_sum, "skipped": skipped,
               "max_term": max_term}
        if not math.isfinite(row["objective"]):
            raise Diverged(f"objective became NaN at epoch {epoch}")
        log.info("epoch %d objective %.4f", epoch, row["objective"])
        trace.append(row)
    return model, trace


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "utts", "num_logZ", "den_logZ", "objective"])
        for r in trace:
            w.writerow([r["epoch"], r["utts"], repr(float(r["num_logZ"])),
                        repr(float(r["den_logZ"])), repr(float(r["objective"]))])


def align(model: AcousticModel, features, transcript, phones: PhoneSet, speaker=SI):
    """Viterbi alignment of the transcript's linear graph: one unit per output frame."""
    out = forward(model, features, speaker)
    T = out.shape[0]
    if len(transcript) * phones.states_per_phone > T:
        raise NoAlignment(f"{len(transcript)} phones cannot fit in {T} output frames")
    graph = _linear_graph([int(p) for p in transcript], phones)
    score, arcs = graph_viterbi(graph, out)
    if not np.isfinite(score):
        raise NoAlignment("no complete alignment path")
    return graph.label[arcs].copy()


def grad_check_end_to_end(model: AcousticModel, features, num, den: SearchGraph,
                          speaker=SI, selector: ParamSelector | None = None,
                          num_probes: int = 100, step: float = 1e-4, rng=None,
                          floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes whose +/- step flips any rectifier are redrawn: the objective is
    not differentiable across a kink and the difference quotient is wrong
    there, not the gradient.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    selector = selector or ParamSelector(ALL, include_si=True)
    out, cache = forward(model, features, speaker, return_cache=True)
    _, gout = mmi_loss_and_grad(out, num, den)
    grads = backward(model, features, speaker, gout, selector, cache)
    params = model.params()
    names = sorted(grads)
    sizes = np.array([grads[n].size for n in names], dtype=float)

    def objective():
        o, c = forward(model, features, speaker, return_cache=True)
        loss, _ = mmi_loss_and_grad(o, num, den)
        return loss.objective, [layer[3] > 0 for layer in c[0]]

    worst, done, tries = 0.0, 0, 0
    while done < num_probes and tries < 20 * num_probes:
        tries += 1
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[name]
        idx = np.unravel_index(int(rng.integers(p.size)), p.shape)
        orig = p[idx]
        p[idx] = orig + step
        f_plus, m_plus = objective()
        p[idx] = orig - step
        f_minus, m_minus = objective()
        p[idx] = orig
        if any((a != b).any() for a, b in zip(m_plus, m_minus)):
            continue
        numeric = (f_plus - f_minus) / (2 * step)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
        done += 1
    if done < num_probes:
        raise RuntimeError(f"only {done} kink-free probes out of {tries} tries")
    return worst
