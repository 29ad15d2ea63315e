"""Command-line entry points: corpus generation through adaptation experiments."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from .corpus import Corpus, GeneratorConfig, generate, read_corpus, write_corpus
from .decoder import (CorpusDecode, DecodeConfig, decode_corpus, read_decode_outputs,
                      write_decode_outputs)
from .errors import LatsupError
from .graphs import (PhoneSet, compile_decoding_graph, compile_denominator,
                     estimate_phone_lm, read_graph, write_graph)
from .harness import (AdaptationConfig, Manifest, adapt_speaker, group_key, references,
                      run_experiment, score)
from .lfmmi import num_steps, train, transcript_items, write_trace_csv
from .model import LrSchedule, ModelConfig, init_model, load_model, save_model

log = logging.getLogger("latsup")


def _kappa_dir(kappa: float) -> str:
    return f"test_{kappa:g}"


def cmd_gen_corpus(a) -> int:
    cfg = GeneratorConfig(num_phones=a.num_phones, feat_dim=a.feat_dim, noise_std=a.noise_std,
                          kappa_train=a.kappa_train, kappa_test=tuple(a.kappa_test),
                          train_speakers=a.train_speakers, train_utts=a.train_utts,
                          test_speakers=a.test_speakers, test_utts=a.test_utts, seed=a.seed)
    train_c, tests = generate(cfg)
    write_corpus(train_c, os.path.join(a.out_dir, "train"))
    for kappa, corpus in tests.items():
        write_corpus(corpus, os.path.join(a.out_dir, _kappa_dir(kappa)))
    with open(os.path.join(a.out_dir, "generator.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(train_c)} training and {sum(map(len, tests.values()))} test utterances"
          f" under {a.out_dir}")
    return 0


def cmd_train_seed(a) -> int:
    corpus = read_corpus(a.corpus)
    os.makedirs(a.out_dir, exist_ok=True)
    cfg = ModelConfig(input_dim=corpus.utterances[0].features.shape[1],
                      num_outputs=a.num_phones, seed=a.seed)
    phones = PhoneSet(cfg.num_outputs)
    lm = estimate_phone_lm([u.transcript for u in corpus], a.lm_order, phones.num_phones)
    den = compile_denominator(lm, phones)
    write_graph(den, os.path.join(a.out_dir, "den.graph"))
    write_graph(compile_decoding_graph(lm, phones), os.path.join(a.out_dir, "decode.graph"))
    model = init_model(cfg)
    items = transcript_items(model, corpus, phones, a.tolerance, lm=lm)
    final_lr = a.lr if a.final_lr is None else a.final_lr
    sched = LrSchedule(a.lr, final_lr, a.epochs, num_steps(len(items), a.batch_size))
    model, trace = train(model, items, den, sched, l2=a.l2, rng=np.random.default_rng(a.seed),
                         batch_size=a.batch_size)
    model.metadata.update(last_lr=final_lr, l2=a.l2, epochs=a.epochs, lm_order=a.lm_order,
                          tolerance=a.tolerance, seed=a.seed)
    save_model(model, os.path.join(a.out_dir, "model.ckpt"))
    write_trace_csv(trace, os.path.join(a.out_dir, "trace.csv"))
    for row in trace:
        print(f"epoch {row['epoch']} objective {row['objective']:.3f}")
    return 0


def _decode_cfg(a) -> DecodeConfig:
    return DecodeConfig(beam=a.beam, lattice_beam=a.lattice_beam, max_active=a.max_active)


def cmd_decode(a) -> int:
    model = load_model(a.model)
    graph = read_graph(a.graph)
    corpus = read_corpus(a.corpus)
    results = decode_corpus(model, corpus, graph, _decode_cfg(a), PhoneSet(model.cfg.num_outputs))
    write_decode_outputs(results, a.out_dir)
    if results.failures:
        print(f"{len(results.failures)} utterances failed: {results.error_counts()}", file=sys.stderr)
    print(f"decoded {len(results)} utterances into {a.out_dir}")
    return 0


def cmd_adapt(a) -> int:
    model = load_model(a.model)
    graph = read_graph(a.graph)
    den = read_graph(a.den) if a.den else graph
    corpus = read_corpus(a.corpus)
    first = read_decode_outputs(a.first_pass)
    phones = PhoneSet(model.cfg.num_outputs)
    cfg = AdaptationConfig(supervision=a.supervision, params=a.params, epochs=a.epochs,
                           final_ratio=a.final_ratio, lhuc_lr=a.lhuc_lr, fraction=a.fraction,
                           tolerance=a.tolerance, lattice_beam=a.supervision_beam, l2=a.l2,
                           max_change=a.max_change, start_lr=a.start_lr,
                           batch_size=a.batch_size, seed=a.seed)
    key = group_key(a.group_by)
    groups = {}
    for u in corpus:
        groups.setdefault(key(u), []).append(u)
    os.makedirs(os.path.join(a.out_dir, "models"), exist_ok=True)
    os.makedirs(os.path.join(a.out_dir, "traces"), exist_ok=True)
    results = CorpusDecode()
    for name in sorted(groups):
        res = adapt_speaker(model, groups[name], first, cfg, den, group=name)
        save_model(res.model, os.path.join(a.out_dir, "models", f"{name}.ckpt"))
        write_trace_csv(res.trace, os.path.join(a.out_dir, "traces", f"{name}.csv"))
        out = decode_corpus(res.model, Corpus(groups[name], corpus.split), graph,
                            _decode_cfg(a), phones, speaker=name)
        results.update(out)
        results.failures.update(out.failures)
        print(f"{name}: adapted on {len(res.used)} utterances, {res.skipped} numerators skipped")
    write_decode_outputs(results, a.out_dir)
    return 0


def _read_text(path) -> dict:
    if os.path.isdir(path):
        return references(read_corpus(path))
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out[parts[0]] = [int(p) for p in parts[1:]]
    return out


def cmd_score(a) -> int:
    s = score(_read_text(a.hyp), _read_text(a.ref), missing_as_empty=a.missing_as_empty)
    print(f"PER {100 * s.rate:.2f}% [ {s.errors} / {s.ref_length}, "
          f"{s.substitutions} sub, {s.insertions} ins, {s.deletions} del ]")
    return 0


def cmd_experiment(a) -> int:
    manifest = Manifest.load(a.manifest)
    if a.out_dir:
        manifest.out_dir = a.out_dir
    report = run_experiment(manifest)
    for level in report.levels:
        print(f"== {level}")
        print(report.condition_table(level))
        print(report.filtering_table(level, manifest.filter_params))
    return 0


def _add_decode_args(p):
    p.add_argument("--beam", type=float, default=16.0)
    p.add_argument("--lattice-beam", type=float, default=8.0)
    p.add_argument("--max-active", type=int, default=2000)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latsup", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    d = GeneratorConfig()

    p = sub.add_parser("gen-corpus", help="write a synthetic train corpus and test corpora")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--num-phones", type=int, default=d.num_phones)
    p.add_argument("--feat-dim", type=int, default=d.feat_dim)
    p.add_argument("--noise-std", type=float, default=d.noise_std)
    p.add_argument("--kappa-train", type=float, default=d.kappa_train)
    p.add_argument("--kappa-test", type=float, nargs="+", default=list(d.kappa_test))
    p.add_argument("--train-speakers", type=int, default=d.train_speakers)
    p.add_argument("--train-utts", type=int, default=d.train_utts)
    p.add_argument("--test-speakers", type=int, default=d.test_speakers)
    p.add_argument("--test-utts", type=int, default=d.test_utts)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-seed", help="LF-MMI training of the seed model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-phones", type=int, default=d.num_phones)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--final-lr", type=float, default=None)
    p.add_argument("--l2", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--lm-order", type=int, default=3, choices=(3, 4))
    p.add_argument("--tolerance", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_seed)

    p = sub.add_parser("decode", help="first-pass decoding to lattices")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    _add_decode_args(p)
    p.set_defaults(func=cmd_decode)

    a = AdaptationConfig()
    p = sub.add_parser("adapt", help="adapt per speaker from first-pass output and re-decode")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--den", default=None, help="denominator graph (default: --graph)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--first-pass", required=True, help="output directory of `decode`")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--supervision", choices=("LAT", "BP"), default=a.supervision)
    p.add_argument("--params", choices=("ALL", "LHUC"), default=a.params)
    p.add_argument("--epochs", type=int, default=a.epochs)
    p.add_argument("--final-ratio", type=float, default=a.final_ratio)
    p.add_argument("--lhuc-lr", type=float, default=a.lhuc_lr)
    p.add_argument("--fraction", type=float, default=a.fraction)
    p.add_argument("--tolerance", type=int, default=a.tolerance)
    p.add_argument("--supervision-beam", type=float, default=a.lattice_beam,
                   help="lattice beam applied to supervision lattices (LAT)")
    p.add_argument("--l2", type=float, default=a.l2)
    p.add_argument("--max-change", type=float, default=a.max_change)
    p.add_argument("--batch-size", type=int, default=a.batch_size)
    p.add_argument("--start-lr", type=float, default=None)
    p.add_argument("--group-by", choices=("speaker", "file"), default="speaker")
    p.add_argument("--seed", type=int, default=a.seed)
    _add_decode_args(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("score", help="phone error rate of hypotheses against references")
    p.add_argument("--hyp", required=True, help="text file or corpus directory")
    p.add_argument("--ref", required=True, help="text file or corpus directory")
    p.add_argument("--missing-as-empty", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("experiment", help="run a manifest's full condition grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LatsupError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
