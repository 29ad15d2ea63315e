"""Unsupervised speaker adaptation with lattice versus best-path supervision.

For one corpus seed: train the seed model, pick the test mismatch that
puts its PER in a target band, decode the test set once, then adapt a copy
of the model per test speaker from those first-pass lattices and decode
again.  LAT keeps the pruned lattice as supervision, BP keeps only its
best path.  With --filter the adaptation data is also limited to each
speaker's most confident utterances.

    python demos/04_adaptation.py --level low --filter
    python demos/04_adaptation.py --level high
"""

import argparse

import numpy as np

from latsup.corpus import GeneratorConfig, make_train_corpus
from latsup.decoder import DecodeConfig
from latsup.graphs import PhoneSet, compile_decoding_graph, compile_denominator, estimate_phone_lm
from latsup.harness import (AdaptationConfig, adapt_and_decode, calibrate_kappa, condition_config,
                            references, score, transcripts)
from latsup.lfmmi import train, transcript_items
from latsup.model import LrSchedule, ModelConfig, init_model

BANDS = {"low": (0.08, 0.15), "high": (0.45, 0.60)}

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--level", choices=sorted(BANDS), default="low")
ap.add_argument("--filter", action="store_true", help="also sweep confidence fractions")
args = ap.parse_args()

gen = GeneratorConfig(seed=args.seed)
phones = PhoneSet(gen.num_phones)
train_c = make_train_corpus(gen)
lm = estimate_phone_lm([u.transcript for u in train_c], 3, gen.num_phones)
den, graph = compile_denominator(lm, phones), compile_decoding_graph(lm, phones)
model = init_model(ModelConfig(input_dim=gen.feat_dim, num_outputs=gen.num_phones, seed=args.seed))
items = transcript_items(model, train_c, phones, 2, lm=lm)
print("training the seed model ...")
model, _ = train(model, items, den, LrSchedule.fixed(0.05, 5, len(items)), l2=2e-3,
                 rng=np.random.default_rng(args.seed))
model.metadata["last_lr"] = 0.05  # adaptation continues from the last training lr

dcfg = DecodeConfig(beam=16, lattice_beam=8)
kappa, base, test, first = calibrate_kappa(model, gen, graph, dcfg, BANDS[args.level],
                                           phones=phones)
print(f"kappa {kappa:.3f} gives baseline PER {100 * base:.2f}%")

refs = references(test)
fractions = (1.0, 0.75, 0.5, 0.25) if args.filter else (1.0,)
cfg0 = AdaptationConfig()
print(f"{'system':<8} {'data':>5} {'PER':>7} {'gain':>6}")
for cond in ("ALL-LAT", "ALL-BP", "LHUC-LAT", "LHUC-BP"):
    for f in fractions if cond.startswith("ALL") else (1.0,):
        hyps, skipped = adapt_and_decode(model, test, first, condition_config(cfg0, cond, f),
                                         den, graph, dcfg, phones)
        per = score(transcripts(hyps), refs, missing_as_empty=True).rate
        print(f"{cond:<8} {round(100 * f):>4}% {100 * per:>6.2f}% {100 * (base - per):>+6.2f}")
