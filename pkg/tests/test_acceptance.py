"""Acceptance criteria, one test each, at the stated tolerances.

Every test records a single PASS/FAIL line; conftest prints them together
at the end of the run.  The benchmark criteria (2 to 5) share seed models
trained once per corpus seed, so the first of them to run pays for that
training; each line reports its own runtime and the shared training time
separately.
"""

import time

import numpy as np
import pytest

from latsup.cli import main
from latsup.corpus import GeneratorConfig, make_test_corpus, make_train_corpus, write_corpus
from latsup.decoder import DecodeConfig, decode_corpus
from latsup.graphs import (PhoneSet, compile_decoding_graph, compile_denominator,
                           estimate_phone_lm, numerator_from_transcript, write_graph)
from latsup.harness import (AdaptationConfig, adapt_and_decode, adapt_speaker, calibrate_kappa,
                            condition_config, references, score, transcripts)
from latsup.lattice import best_path, forward_backward, prune, random_lattice
from latsup.lfmmi import (grad_check_end_to_end, mmi_loss_and_grad, output_alignment, train,
                          transcript_items)
from latsup.model import (SI, LrSchedule, ModelConfig, forward, init_model, load_model,
                          sat_lhuc_pass_selector, save_model)

from oracles import enum_logz

RESULTS = []  # (criterion, passed, detail), printed by conftest
SEEDS = (0, 1, 2)
LOW, HIGH = (0.08, 0.15), (0.45, 0.60)
DECODE = DecodeConfig(beam=16, lattice_beam=8)
SEED_TRAINING = dict(epochs=5, lr=0.05, l2=2e-3, lm_order=3, tolerance=2)


def record(criterion, passed, detail):
    RESULTS.append((criterion, bool(passed), detail))
    assert passed, detail


# -- shared benchmark state ---------------------------------------------------------------

class Benchmarks:
    """Seed models and adaptation results, computed on first use."""

    def __init__(self):
        self.seeds = {}
        self.bench = {}
        self.training_time = 0.0

    def seed(self, s):
        if s not in self.seeds:
            t0 = time.perf_counter()
            gen = GeneratorConfig(seed=s)
            phones = PhoneSet(gen.num_phones)
            train_c = make_train_corpus(gen)
            lm = estimate_phone_lm([u.transcript for u in train_c], SEED_TRAINING["lm_order"],
                                   gen.num_phones)
            den = compile_denominator(lm, phones)
            model = init_model(ModelConfig(input_dim=gen.feat_dim, num_outputs=gen.num_phones,
                                           seed=s))
            items = transcript_items(model, train_c, phones, SEED_TRAINING["tolerance"], lm=lm)
            sched = LrSchedule.fixed(SEED_TRAINING["lr"], SEED_TRAINING["epochs"], len(items))
            model, trace = train(model, items, den, sched, l2=SEED_TRAINING["l2"],
                                 rng=np.random.default_rng(s))
            model.metadata["last_lr"] = SEED_TRAINING["lr"]
            self.training_time += time.perf_counter() - t0
            self.seeds[s] = dict(gen=gen, phones=phones, den=den, model=model, trace=trace,
                                 graph=compile_decoding_graph(lm, phones))
        return self.seeds[s]

    def level(self, s, name, target):
        key = (s, name)
        if key not in self.bench:
            st = self.seed(s)
            kappa, per, corpus, first = calibrate_kappa(st["model"], st["gen"], st["graph"],
                                                        DECODE, target, phones=st["phones"])
            self.bench[key] = dict(kappa=kappa, baseline=per, corpus=corpus, first=first,
                                   per={})
        return self.bench[key]

    def adapted_per(self, s, name, target, condition, fraction=1.0):
        b = self.level(s, name, target)
        if (condition, fraction) not in b["per"]:
            st = self.seed(s)
            cfg = condition_config(AdaptationConfig(), condition, fraction)
            hyps, _ = adapt_and_decode(st["model"], b["corpus"], b["first"], cfg, st["den"],
                                       st["graph"], DECODE, st["phones"])
            b["per"][(condition, fraction)] = score(transcripts(hyps), references(b["corpus"]),
                                                    missing_as_empty=True).rate
        return b["per"][(condition, fraction)]


@pytest.fixture(scope="session")
def benchmarks():
    return Benchmarks()


def _fmt(xs):
    return "/".join(f"{100 * x:.2f}" for x in xs)


# -- 1: numerical core ------------------------------------------------------------------

def test_criterion_1_numerical_core():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    notes, ok = [], True

    lats, worst = [], 0.0
    while len(lats) < 200:
        lat = random_lattice(rng, num_frames=int(rng.integers(1, 6)), max_width=3)
        if lat.num_states <= 12:
            lats.append(lat)
    for lat in lats:
        want = enum_logz(lat)
        got = forward_backward(lat).total_logZ
        worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    ok &= worst <= 1e-8
    notes.append(f"logZ rel err {worst:.1e}")

    marg = 0.0
    gen_lats = lats + [random_lattice(rng, num_frames=int(rng.integers(1, 30)),
                                      max_width=int(rng.integers(1, 6))) for _ in range(300)]
    for lat in gen_lats:
        for row in forward_backward(lat).frame_marginals:
            marg = max(marg, abs(sum(row.values()) - 1.0))
    ok &= marg <= 1e-6
    notes.append(f"marginal dev {marg:.1e}")

    # toy systems for the end-to-end gradient check
    ps = PhoneSet(3)
    lm = estimate_phone_lm([list(rng.integers(1, 4, size=6)) for _ in range(40)], 2, 3)
    den = compile_denominator(lm, ps)
    grad_err, probes = 0.0, 0
    for k in range(2):
        cfg = ModelConfig(input_dim=4, hidden_dims=(8, 8), splice=((-1, 0, 1),) * 2,
                          strides=(1, 1), subsample=1, num_outputs=3, seed=k)
        m = init_model(cfg)
        for b in m.biases:
            b[:] = 0.1
        m.add_speaker("s", np.random.default_rng(k))
        x = np.random.default_rng(10 + k).normal(size=(12, 4))
        T = m.output_length(12)
        ali = [1] * (T // 3) + [2] * (T // 3) + [3] * (T - 2 * (T // 3))
        num = numerator_from_transcript([1, 2, 3], ali, ps, 1, lm=lm)
        grad_err = max(grad_err, grad_check_end_to_end(m, x, num, den, speaker="s",
                                                       num_probes=100,
                                                       rng=np.random.default_rng(k)))
        probes += 100
    ok &= grad_err <= 1e-3
    notes.append(f"grad rel err {grad_err:.1e} over {probes} probes")

    gen = GeneratorConfig()
    phones = PhoneSet(gen.num_phones)
    test = make_test_corpus(gen, 0.5).utterances[:50]
    lm12 = estimate_phone_lm([u.transcript for u in test], 3, gen.num_phones)
    den12 = compile_denominator(lm12, phones)
    model = init_model(ModelConfig())
    rows = 0.0
    for u in test:
        num = numerator_from_transcript(u.transcript, output_alignment(model, u.alignment),
                                        phones, 2, lm=lm12)
        _, g = mmi_loss_and_grad(forward(model, u.features), num, den12)
        rows = max(rows, float(np.abs(g.sum(axis=1)).max()))
    ok &= rows <= 1e-5
    notes.append(f"row sum {rows:.1e} on {len(test)} utts")

    same = all(prune(lat, 0.0).arc_tuples() == best_path(lat).arc_tuples() for lat in lats[:100])
    ok &= same
    notes.append(f"prune0=bp {'yes' if same else 'no'}")

    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    record(1, ok, "; ".join(notes) + f"; {elapsed:.0f}s")


# -- 2: seed training sanity ------------------------------------------------------------

def test_criterion_2_seed_training(benchmarks):
    t0 = time.perf_counter()
    st = benchmarks.seed(0)
    test = make_test_corpus(st["gen"], 0.0)
    res = decode_corpus(st["model"], test, st["graph"], DECODE, st["phones"])
    per = score(transcripts(res), references(test), missing_as_empty=True).rate
    worst_term = max(r["max_term"] for r in st["trace"])
    elapsed = time.perf_counter() - t0
    ok = per <= 0.02 and worst_term <= 1e-6 and elapsed < 600
    record(2, ok, f"test PER {100 * per:.2f}% (limit 2%); max per-utterance objective "
                  f"{worst_term:.2e}; {elapsed:.0f}s incl. training")


# -- 3 and 4: mismatch trends ------------------------------------------------------------

def test_criterion_3_low_mismatch(benchmarks):
    for s in SEEDS:
        benchmarks.seed(s)
    t0 = time.perf_counter()
    base, lat, bp = [], [], []
    for s in SEEDS:
        b = benchmarks.level(s, "low", LOW)
        base.append(b["baseline"])
        lat.append(benchmarks.adapted_per(s, "low", LOW, "ALL-LAT"))
        bp.append(benchmarks.adapted_per(s, "low", LOW, "ALL-BP"))
    rel = np.mean([(b - a) / b for b, a in zip(base, lat)])
    wins = sum(a <= b for a, b in zip(lat, bp))
    elapsed = time.perf_counter() - t0
    ok = all(LOW[0] <= b <= LOW[1] for b in base) and rel >= 0.05 and wins >= 2 and elapsed < 1800
    record(3, ok, f"baseline {_fmt(base)} ALL-LAT {_fmt(lat)} ALL-BP {_fmt(bp)}; "
                  f"mean rel gain {100 * rel:.1f}% (need 5%); LAT<=BP on {wins}/3; "
                  f"{elapsed:.0f}s (+{benchmarks.training_time:.0f}s shared training)")


def test_criterion_4_high_mismatch(benchmarks):
    for s in SEEDS:
        benchmarks.seed(s)
    t0 = time.perf_counter()
    base, lat, bp = [], [], []
    for s in SEEDS:
        b = benchmarks.level(s, "high", HIGH)
        base.append(b["baseline"])
        lat.append(benchmarks.adapted_per(s, "high", HIGH, "ALL-LAT"))
        bp.append(benchmarks.adapted_per(s, "high", HIGH, "ALL-BP"))
    gain_lat = 100 * np.mean([b - a for b, a in zip(base, lat)])
    gain_bp = 100 * np.mean([b - a for b, a in zip(base, bp)])
    elapsed = time.perf_counter() - t0
    ok = (all(HIGH[0] <= b <= HIGH[1] for b in base) and gain_lat >= 0.5
          and gain_bp < gain_lat and elapsed < 1800)
    record(4, ok, f"baseline {_fmt(base)} ALL-LAT {_fmt(lat)} ALL-BP {_fmt(bp)}; "
                  f"mean abs gain LAT {gain_lat:+.2f} BP {gain_bp:+.2f} points; {elapsed:.0f}s")


# -- 5: filtering trend ---------------------------------------------------------------------

def test_criterion_5_filtering(benchmarks):
    t0 = time.perf_counter()
    fracs = (1.0, 0.75, 0.5, 0.25)
    bp_early, lat_tighter, notes = 0, 0, []
    for s in SEEDS:
        bp = {f: benchmarks.adapted_per(s, "low", LOW, "ALL-BP", f) for f in fracs}
        lat = {f: benchmarks.adapted_per(s, "low", LOW, "ALL-LAT", f) for f in fracs}
        best = min(fracs, key=lambda f: (bp[f], -f))  # a tie goes to the larger fraction
        bp_early += best < 1.0
        wide = [f for f in fracs if f >= 0.5]
        spread_lat = max(lat[f] for f in wide) - min(lat[f] for f in wide)
        spread_bp = max(bp[f] for f in wide) - min(bp[f] for f in wide)
        lat_tighter += spread_lat <= spread_bp
        notes.append(f"seed {s}: BP best at {round(100 * best)}%, "
                     f"spread LAT {100 * spread_lat:.2f} BP {100 * spread_bp:.2f}")
    elapsed = time.perf_counter() - t0
    ok = bp_early >= 2 and lat_tighter >= 2
    record(5, ok, "; ".join(notes) + f"; {elapsed:.0f}s")


# -- 6: LHUC contracts -------------------------------------------------------------------

def test_criterion_6_lhuc_contracts(benchmarks, tmp_path):
    st = benchmarks.seed(0)
    model = st["model"]
    test = make_test_corpus(st["gen"], 0.6)
    probe = model.copy()
    probe.add_speaker("ones", init="si")
    for v in probe.lhuc["ones"]:
        v[:] = 1.0
    identical = all(np.array_equal(forward(probe, u.features, SI), forward(probe, u.features, "ones"))
                    for u in test.utterances[:20])

    spk = sorted(test.speakers)[0]
    utts = test.by_speaker(spk)
    first = decode_corpus(model, utts, st["graph"], DECODE, st["phones"])
    res = adapt_speaker(model, utts, first, AdaptationConfig(params="LHUC"), st["den"])
    save_model(model, tmp_path / "seed.ckpt")
    save_model(res.model, tmp_path / "adapted.ckpt")
    a, b = load_model(tmp_path / "seed.ckpt").params(), load_model(tmp_path / "adapted.ckpt").params()
    non_lhuc = [n for n in a if not n.startswith("lhuc/")]
    untouched = all(np.array_equal(a[n], b[n]) for n in non_lhuc) and set(b) - set(a) == {
        f"lhuc/{spk}/{i}" for i in range(model.num_layers)}
    moved = any(not np.array_equal(b[f"lhuc/{spk}/{i}"], a[f"lhuc/{SI}/{i}"])
                for i in range(model.num_layers))

    rng = np.random.default_rng(0)
    freq = sum(sat_lhuc_pass_selector(rng, 0.5) == "SI" for _ in range(10_000)) / 10_000
    ok = identical and untouched and moved and abs(freq - 0.5) <= 0.02
    record(6, ok, f"all-ones identical {identical}; LHUC-only diff confined "
                  f"{untouched} (LHUC moved {moved}); SI frequency {freq:.4f}")


# -- 7: determinism ---------------------------------------------------------------------------

def test_criterion_7_determinism(benchmarks, tmp_path):
    st = benchmarks.seed(0)
    save_model(st["model"], tmp_path / "seed.ckpt")
    write_graph(st["graph"], tmp_path / "decode.graph")
    write_graph(st["den"], tmp_path / "den.graph")
    gen = GeneratorConfig(seed=0, test_speakers=2, test_utts=6)
    write_corpus(make_test_corpus(gen, 0.6), tmp_path / "test")
    (tmp_path / "m.ini").write_text(
        "[inputs]\nmodel = seed.ckpt\ngraph = decode.graph\nden = den.graph\n"
        "[mismatch]\nmid = test\n[adapt]\nepochs = 1\nfractions = 1.0 0.5\n"
        "[output]\ndir = run\n")
    outs = []
    for k in range(2):
        assert main(["experiment", "--manifest", str(tmp_path / "m.ini"),
                     "--out-dir", str(tmp_path / f"run{k}")]) == 0
        outs.append({n: (tmp_path / f"run{k}" / n).read_bytes()
                     for n in ("results.csv", "table_mid.txt", "filtering_mid.txt")})
    same = outs[0] == outs[1]
    rows = outs[0]["results.csv"].decode().count("\n") - 1
    record(7, same, f"two runs, {rows} CSV rows, byte-identical {same}")
