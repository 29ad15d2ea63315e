"""Unsupervised test-time adaptation experiments.

The pipeline per mismatch level: decode the test set with the seed model,
turn each first-pass lattice into supervision (the pruned lattice for LAT,
its best path for BP), optionally keep only the most confident fraction of
every speaker's utterances, adapt a clone of the seed model per speaker,
decode the same utterances again with the same graph and beams, and score.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Corpus, GeneratorConfig, make_test_corpus, read_corpus
from .decoder import CorpusDecode, DecodeConfig, DecodeResult, decode_corpus
from .errors import (AllUtterancesFiltered, BadConfig, EmptyInput,
                     MissingReference)
from .graphs import PhoneSet, SearchGraph, numerator_from_lattice, read_graph
from .lattice import prune
from .lfmmi import TrainItem, num_steps, train
from .model import (ALL, LHUC_ONLY, AcousticModel, LrSchedule, ParamSelector,
                    load_model)

log = logging.getLogger(__name__)

LAT, BP = "LAT", "BP"
PARAMS = {"ALL": ALL, "LHUC": LHUC_ONLY}
CONDITIONS = ("baseline", "LHUC-LAT", "LHUC-BP", "ALL-LAT", "ALL-BP")
FRACTIONS = (1.0, 0.75, 0.5, 0.25)


# ---------------------------------------------------------------------------
# Scoring


@dataclass(frozen=True)
class Score:
    errors: int
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int

    @property
    def rate(self) -> float:
        return self.errors / self.ref_length if self.ref_length else 0.0

    def __add__(self, other: "Score") -> "Score":
        return Score(self.errors + other.errors,
                     self.substitutions + other.substitutions,
                     self.insertions + other.insertions,
                     self.deletions + other.deletions,
                     self.ref_length + other.ref_length)


def align_counts(hyp, ref) -> Score:
    """Unit-cost edit distance with its S/I/D breakdown.

    Among minimum-cost alignments the one with the most substitutions wins.
    I - D is fixed by the two lengths, so the breakdown is unique and
    swapping hyp and ref swaps insertions with deletions.
    """
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    # cells hold (cost, -substitutions, insertions)
    prev = [(j, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0)]
        for j in range(1, m + 1):
            c, s, k = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, s, k)
            else:
                diag = (c + 1, s - 1, k)
            c, s, k = prev[j]
            dele = (c + 1, s, k)
            c, s, k = cur[j - 1]
            ins = (c + 1, s, k + 1)
            cur.append(min(diag, dele, ins, key=lambda x: (x[0], x[1])))
        prev = cur
    cost, negsub, ins = prev[m]
    dels = cost + negsub - ins
    return Score(cost, -negsub, ins, dels, n)


def score(hyps: dict, refs: dict, missing_as_empty: bool = False) -> Score:
    """Pool edit counts over utterances.  ``hyps`` and ``refs`` map id -> list.

    Every hypothesis needs a reference.  A reference without a hypothesis is
    an error unless ``missing_as_empty``, which scores it as all deletions
    (how a failed decode should count).
    """
    extra = sorted(set(hyps) - set(refs))
    if extra:
        raise MissingReference(f"no reference for {extra[0]!r} ({len(extra)} total)")
    lost = sorted(set(refs) - set(hyps))
    if lost and not missing_as_empty:
        raise MissingReference(f"no hypothesis for {lost[0]!r} ({len(lost)} total)")
    total = Score(0, 0, 0, 0, 0)
    for utt in sorted(refs):
        total = total + align_counts(hyps.get(utt, []), refs[utt])
    return total


def transcripts(results) -> dict:
    return {utt: r.transcript for utt, r in results.items()}


def references(corpus: Corpus) -> dict:
    return {u.id: list(u.transcript) for u in corpus}


# ---------------------------------------------------------------------------
# Filtering and adaptation


def filter_by_confidence(results, fraction: float) -> list:
    """Ids of the ceil(fraction * N) most confident utterances, sorted by id.

    ``results`` maps utterance id to a DecodeResult or a bare confidence.
    Ties go to the smaller id, so selections nest as the fraction grows.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if not results:
        raise EmptyInput("no decoded utterances to filter")
    conf = {utt: (r.confidence if isinstance(r, DecodeResult) else float(r))
            for utt, r in results.items()}
    ranked = sorted(conf, key=lambda utt: (-conf[utt], utt))
    keep = math.ceil(fraction * len(ranked) - 1e-9)
    return sorted(ranked[:keep])


@dataclass(frozen=True)
class AdaptationConfig:
    supervision: str = LAT
    params: str = "ALL"
    epochs: int = 3
    final_ratio: float = 0.1  # ALL: end lr = start * ratio (0.2 is the /5 variant)
    lhuc_lr: float = 0.7
    fraction: float = 1.0
    tolerance: int = 2
    lattice_beam: float = 2.0
    l2: float = 0.0
    max_change: float | None = 0.2
    start_lr: float | None = None  # overrides the checkpoint's last lr
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise BadConfig("batch_size must be >= 1")
        if self.supervision not in (LAT, BP):
            raise BadConfig(f"supervision must be LAT or BP, not {self.supervision!r}")
        if self.params not in PARAMS:
            raise BadConfig(f"params must be ALL or LHUC, not {self.params!r}")
        if self.epochs < 0:
            raise BadConfig("epochs must be non-negative")
        if not 0 < self.fraction <= 1:
            raise BadConfig("fraction must lie in (0, 1]")
        if self.lattice_beam < 0:
            raise BadConfig("lattice_beam must be non-negative")

    @property
    def supervision_beam(self) -> float:
        return self.lattice_beam if self.supervision == LAT else 0.0

    @property
    def name(self) -> str:
        return f"{self.params}-{self.supervision}"


def schedule_for(model: AcousticModel, cfg: AdaptationConfig, num_items: int) -> LrSchedule:
    if cfg.params == "LHUC":
        return LrSchedule.fixed(cfg.lhuc_lr, cfg.epochs, num_items)
    start = cfg.start_lr
    if start is None:
        start = model.metadata.get("last_lr")
    if start is None:
        raise BadConfig("seed checkpoint has no last_lr in its metadata; set start_lr")
    start = float(start)
    return LrSchedule(start, start * cfg.final_ratio, cfg.epochs, num_items)


def supervision_items(utterances, first_pass, cfg: AdaptationConfig, group: str) -> list:
    beam = cfg.supervision_beam
    items = []
    for u in utterances:
        lat = prune(first_pass[u.id].lattice, beam)
        items.append(TrainItem(u.id, group, u.features,
                               numerator_from_lattice(lat, cfg.tolerance)))
    return items


def _group_seed(cfg: AdaptationConfig, group: str) -> list:
    return [cfg.seed, zlib.crc32(group.encode())]


@dataclass
class AdaptResult:
    model: AcousticModel
    group: str
    used: list
    skipped: int = 0
    trace: list = field(default_factory=list)


def adapt_speaker(model: AcousticModel, utterances, first_pass, cfg: AdaptationConfig,
                  den: SearchGraph, group: str | None = None) -> AdaptResult:
    """Adapt a clone of ``model`` to one speaker (or file) and return it.

    The clone gets LHUC vectors for ``group`` copied from the SI ones, so an
    adaptation with zero epochs reproduces the seed model exactly; the seed
    model itself is never touched.  Utterances the first pass failed on are
    ineligible.  Numerators that turn out empty during training are skipped
    and counted in ``skipped``.
    """
    utterances = list(utterances)
    if group is None:
        speakers = {u.speaker for u in utterances}
        if len(speakers) != 1:
            raise ValueError("utterances span several speakers; pass group explicitly")
        group = speakers.pop()
    decoded = {u.id: first_pass[u.id] for u in utterances if u.id in first_pass}
    if not decoded:
        raise AllUtterancesFiltered(f"{group}: no first-pass lattices")
    keep = set(filter_by_confidence(decoded, cfg.fraction))
    chosen = [u for u in utterances if u.id in keep]
    if not chosen:
        raise AllUtterancesFiltered(f"{group}: filtering left no utterances")
    rng = np.random.default_rng(_group_seed(cfg, group))
    adapted = model.copy()
    adapted.add_speaker(group, init="si")
    if cfg.epochs == 0:
        return AdaptResult(adapted, group, sorted(keep))
    items = supervision_items(chosen, decoded, cfg, group)
    sched = schedule_for(model, cfg, num_steps(len(items), cfg.batch_size))
    selector = ParamSelector(PARAMS[cfg.params])
    adapted, trace = train(adapted, items, den, sched, l2=cfg.l2, rng=rng,
                           selector=selector, speaker=group,
                           max_change=cfg.max_change, skip_empty=True,
                           batch_size=cfg.batch_size)
    skipped = sum(r["skipped"] for r in trace)
    if skipped:
        log.warning("%s: %d empty numerators skipped", group, skipped)
    return AdaptResult(adapted, group, sorted(keep), skipped, trace)


def group_key(group_by: str):
    if group_by == "speaker":
        return lambda u: u.speaker
    if group_by == "file":
        return lambda u: u.id
    raise BadConfig(f"group_by must be speaker or file, not {group_by!r}")


@dataclass
class ConditionResult:
    name: str
    fraction: float
    score: Score
    skipped: int = 0
    failures: int = 0


def adapt_and_decode(model, corpus: Corpus, first_pass: CorpusDecode, cfg: AdaptationConfig,
                     den: SearchGraph, graph: SearchGraph, dcfg: DecodeConfig,
                     phones: PhoneSet, group_by: str = "speaker"):
    """Adapt per group, re-decode each group's utterances, return (results, skipped)."""
    key = group_key(group_by)
    groups = {}
    for u in corpus:
        groups.setdefault(key(u), []).append(u)
    results = CorpusDecode()
    skipped = 0
    for name in sorted(groups):
        utts = groups[name]
        sub = Corpus(utts, corpus.split)
        try:
            res = adapt_speaker(model, utts, first_pass, cfg, den, group=name)
        except AllUtterancesFiltered as exc:
            log.warning("%s; keeping first-pass output", exc)
            for u in utts:
                if u.id in first_pass:
                    results[u.id] = first_pass[u.id]
            continue
        skipped += res.skipped
        out = decode_corpus(res.model, sub, graph, dcfg, phones, speaker=name)
        results.update(out)
        results.failures.update(out.failures)
    return results, skipped


# ---------------------------------------------------------------------------
# Calibration


def calibrate_kappa(model, gen: GeneratorConfig, graph: SearchGraph, dcfg: DecodeConfig,
                    target: tuple, lo: float = 0.0, hi: float = 2.0, steps: int = 12,
                    phones: PhoneSet | None = None):
    """Bisect the test mismatch until the seed PER lands inside ``target``.

    Returns ``(kappa, per, test_corpus, first_pass)``.  PER is assumed to
    grow with kappa; raises BadConfig if the bracket cannot reach it.
    """
    phones = phones or PhoneSet(model.cfg.num_outputs)
    want_lo, want_hi = target

    def evaluate(kappa):
        corpus = make_test_corpus(gen, kappa)
        fp = decode_corpus(model, corpus, graph, dcfg, phones)
        return score(transcripts(fp), references(corpus), missing_as_empty=True).rate, corpus, fp

    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        rate, corpus, fp = evaluate(mid)
        log.info("calibrate: kappa %.4f -> PER %.4f", mid, rate)
        if want_lo <= rate <= want_hi:
            return mid, rate, corpus, fp
        if rate < want_lo:
            lo = mid
        else:
            hi = mid
    raise BadConfig(f"no kappa in the bracket gives PER within {target}")


# ---------------------------------------------------------------------------
# Experiments


def _floats(text: str) -> list:
    return [float(x) for x in text.replace(",", " ").split()]


def _names(text: str) -> list:
    return [x for x in text.replace(",", " ").split()]


@dataclass
class Manifest:
    """Parsed experiment manifest (an INI file).

    ::

        [inputs]
        model = seed.ckpt          # written by train-seed
        graph = decode.graph       # decoding graph
        den = den.graph            # optional, defaults to graph
        [mismatch]
        low = corpora/test_low     # label = test corpus directory
        [decode]
        beam = 16
        lattice_beam = 8
        [adapt]
        conditions = LHUC-LAT LHUC-BP ALL-LAT ALL-BP
        fractions = 1.0 0.75 0.5 0.25
        filter_params = ALL
        lattice_beam = 2
        group_by = speaker
        seed = 0
        [output]
        dir = runs/demo
    """
    path: str
    model: str
    graph: str
    den: str
    levels: dict
    decode: DecodeConfig
    conditions: list
    fractions: list
    filter_params: str
    base: AdaptationConfig
    group_by: str
    out_dir: str
    text: str = ""

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path) as fh:
            text = fh.read()
        return cls.parse(text, os.path.dirname(os.path.abspath(path)), path)

    @classmethod
    def parse(cls, text: str, root: str = ".", path: str = "<string>") -> "Manifest":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.read_string(text)

        def here(p):
            return p if os.path.isabs(p) else os.path.normpath(os.path.join(root, p))

        for sec in ("inputs", "mismatch"):
            if not cp.has_section(sec):
                raise BadConfig(f"manifest lacks a [{sec}] section")
        inputs = cp["inputs"]
        for key in ("model", "graph"):
            if key not in inputs:
                raise BadConfig(f"manifest [inputs] lacks {key!r}")
        levels = {k: here(v) for k, v in cp["mismatch"].items()}
        if not levels:
            raise BadConfig("manifest [mismatch] names no test corpus")
        dsec = cp["decode"] if cp.has_section("decode") else {}
        dcfg = DecodeConfig(beam=float(dsec.get("beam", 16)),
                            lattice_beam=float(dsec.get("lattice_beam", 8)),
                            max_active=int(dsec.get("max_active", 2000)),
                            acoustic_scale=float(dsec.get("acoustic_scale", 1.0)))
        a = cp["adapt"] if cp.has_section("adapt") else {}
        mc = a.get("max_change", "0.2")
        start = a.get("start_lr", "")
        base = AdaptationConfig(epochs=int(a.get("epochs", 3)),
                                final_ratio=float(a.get("final_ratio", 0.1)),
                                lhuc_lr=float(a.get("lhuc_lr", 0.7)),
                                tolerance=int(a.get("tolerance", 2)),
                                lattice_beam=float(a.get("lattice_beam", 2)),
                                l2=float(a.get("l2", 0.0)),
                                max_change=None if mc.lower() == "none" else float(mc),
                                start_lr=float(start) if start else None,
                                batch_size=int(a.get("batch_size", 1)),
                                seed=int(a.get("seed", 0)))
        conditions = _names(a.get("conditions", "LHUC-LAT LHUC-BP ALL-LAT ALL-BP"))
        for c in conditions:
            p, _, s = c.partition("-")
            if p not in PARAMS or s not in (LAT, BP):
                raise BadConfig(f"unknown condition {c!r}")
        fractions = _floats(a.get("fractions", "1.0 0.75 0.5 0.25"))
        for f in fractions:
            if not 0 < f <= 1:
                raise BadConfig(f"fraction {f} outside (0, 1]")
        out = cp["output"] if cp.has_section("output") else {}
        return cls(path=path, model=here(inputs["model"]), graph=here(inputs["graph"]),
                   den=here(inputs.get("den", inputs["graph"])), levels=levels, decode=dcfg,
                   conditions=conditions, fractions=fractions,
                   filter_params=a.get("filter_params", "ALL"), base=base,
                   group_by=a.get("group_by", "speaker"),
                   out_dir=here(out.get("dir", "run")), text=text)

    def check_inputs(self) -> None:
        missing = [p for p in [self.model, self.graph, self.den]
                   if not os.path.isfile(p)]
        missing += [p for p in self.levels.values() if not os.path.isdir(p)]
        if missing:
            raise FileNotFoundError(f"missing experiment input: {missing[0]}")

    def cells(self) -> list:
        """(level, condition, fraction) in run order."""
        out = []
        for level in self.levels:
            out.append((level, "baseline", 1.0))
            for c in self.conditions:
                out.append((level, c, 1.0))
            for sup in (LAT, BP):
                c = f"{self.filter_params}-{sup}"
                for f in self.fractions:
                    if f != 1.0:
                        out.append((level, c, f))
        return out


def _file_digest(path) -> str:
    h = hashlib.sha256()
    if os.path.isdir(path):
        for dirpath, dirnames, files in os.walk(path):
            dirnames.sort()
            for name in sorted(files):
                full = os.path.join(dirpath, name)
                h.update(os.path.relpath(full, path).encode())
                with open(full, "rb") as fh:
                    h.update(fh.read())
    else:
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def reproducibility_stamp(manifest: Manifest) -> dict:
    import scipy
    from . import __version__
    inputs = {"model": manifest.model, "graph": manifest.graph, "den": manifest.den}
    inputs.update({f"mismatch.{k}": v for k, v in manifest.levels.items()})
    return {"config_sha256": hashlib.sha256(manifest.text.encode()).hexdigest(),
            "inputs_sha256": {k: _file_digest(v) for k, v in sorted(inputs.items())},
            "seeds": {"adapt": manifest.base.seed},
            "versions": {"latsup": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__}}


CSV_FIELDS = ["level", "condition", "fraction", "per", "baseline_per", "relative_change",
              "errors", "substitutions", "insertions", "deletions", "ref_length",
              "skipped_numerators", "decode_failures"]


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)

    def add(self, level: str, res: ConditionResult, baseline: Score) -> dict:
        rel = (baseline.rate - res.score.rate) / baseline.rate if baseline.rate else 0.0
        row = {"level": level, "condition": res.name, "fraction": res.fraction,
               "per": res.score.rate, "baseline_per": baseline.rate,
               "relative_change": rel, "errors": res.score.errors,
               "substitutions": res.score.substitutions,
               "insertions": res.score.insertions, "deletions": res.score.deletions,
               "ref_length": res.score.ref_length,
               "skipped_numerators": res.skipped, "decode_failures": res.failures}
        self.rows.append(row)
        return row

    def lookup(self, level: str, condition: str, fraction: float = 1.0) -> dict:
        for r in self.rows:
            if r["level"] == level and r["condition"] == condition and r["fraction"] == fraction:
                return r
        raise KeyError((level, condition, fraction))

    @property
    def levels(self) -> list:
        seen = []
        for r in self.rows:
            if r["level"] not in seen:
                seen.append(r["level"])
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([repr(float(r[k])) if isinstance(r[k], float) else r[k]
                        for k in CSV_FIELDS])
        return buf.getvalue()

    def condition_table(self, level: str) -> str:
        """Baseline plus the four adapted systems, PER and relative change in %."""
        lines = [f"{'system':<10} {'PER':>6} {'rel':>6}"]
        for c in CONDITIONS:
            try:
                r = self.lookup(level, c)
            except KeyError:
                continue
            rel = "" if c == "baseline" else f"{100 * r['relative_change']:.1f}"
            lines.append(f"{c:<10} {100 * r['per']:>6.1f} {rel:>6}")
        return "\n".join(lines) + "\n"

    def filtering_table(self, level: str, params: str = "ALL") -> str:
        """PER by fraction of adaptation data kept, one column per supervision."""
        lines = [f"{'data %':<8} {LAT:>6} {BP:>6}"]
        fracs = sorted({r["fraction"] for r in self.rows if r["level"] == level
                        and r["condition"].startswith(params + "-")}, reverse=True)
        for f in fracs:
            cells = []
            for sup in (LAT, BP):
                try:
                    cells.append(f"{100 * self.lookup(level, f'{params}-{sup}', f)['per']:>6.1f}")
                except KeyError:
                    cells.append(f"{'-':>6}")
            lines.append(f"{round(100 * f):<8d} " + " ".join(cells))
        return "\n".join(lines) + "\n"


def condition_config(base: AdaptationConfig, name: str, fraction: float) -> AdaptationConfig:
    params, _, sup = name.partition("-")
    d = asdict(base)
    d.update(params=params, supervision=sup, fraction=fraction)
    return AdaptationConfig(**d)


def run_experiment(manifest) -> ExperimentReport:
    """Run every cell of the manifest and write the report files.

    Output directory contents: ``results.csv`` (full precision),
    ``table_<level>.txt`` and ``filtering_<level>.txt`` (one decimal),
    ``stamp.json`` and ``MANIFEST`` (one line per finished cell, flushed as
    cells complete so an interrupted run shows how far it got).
    """
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    manifest.check_inputs()
    model = load_model(manifest.model)
    graph = read_graph(manifest.graph)
    den = graph if manifest.den == manifest.graph else read_graph(manifest.den)
    phones = PhoneSet(model.cfg.num_outputs)
    group_key(manifest.group_by)
    out = manifest.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "stamp.json"), "w") as fh:
        json.dump(reproducibility_stamp(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    report = ExperimentReport()
    done = open(os.path.join(out, "MANIFEST"), "w")
    try:
        for level, path in manifest.levels.items():
            corpus = read_corpus(path)
            refs = references(corpus)
            first = decode_corpus(model, corpus, graph, manifest.decode, phones)
            base = score(transcripts(first), refs, missing_as_empty=True)
            report.add(level, ConditionResult("baseline", 1.0, base, 0, len(first.failures)), base)
            done.write(f"{level} baseline 1\n")
            done.flush()
            for lv, name, frac in manifest.cells():
                if lv != level or name == "baseline":
                    continue
                cfg = condition_config(manifest.base, name, frac)
                hyps, skipped = adapt_and_decode(model, corpus, first, cfg, den, graph,
                                                 manifest.decode, phones, manifest.group_by)
                sc = score(transcripts(hyps), refs, missing_as_empty=True)
                report.add(level, ConditionResult(name, frac, sc, skipped,
                                                  len(hyps.failures)), base)
                done.write(f"{level} {name} {frac:g}\n")
                done.flush()
                log.info("%s %s %.2f: PER %.4f", level, name, frac, sc.rate)
            with open(os.path.join(out, f"table_{level}.txt"), "w") as fh:
                fh.write(report.condition_table(level))
            with open(os.path.join(out, f"filtering_{level}.txt"), "w") as fh:
                fh.write(report.filtering_table(level, manifest.filter_params))
    finally:
        done.close()
        with open(os.path.join(out, "results.csv"), "w", newline="") as fh:
            fh.write(report.to_csv())
    return report
