"""Train a seed model on the synthetic corpus and sweep the test mismatch.

The generator draws phone sequences from a Markov chain, renders each
phone as its class mean plus Gaussian noise, and distorts every speaker
with a random affine transform whose size is set by kappa.  Training
speakers use a fixed kappa; test speakers get fresh transforms at the
kappa under study, which is the single knob for baseline difficulty.

    python demos/03_seed_training.py            # desk scale, a few minutes
    python demos/03_seed_training.py --quick    # smaller corpus
"""

import argparse
import time

import numpy as np

from latsup.corpus import GeneratorConfig, make_test_corpus, make_train_corpus
from latsup.decoder import DecodeConfig, decode_corpus
from latsup.graphs import PhoneSet, compile_decoding_graph, compile_denominator, estimate_phone_lm
from latsup.harness import references, score, transcripts
from latsup.lfmmi import train, transcript_items
from latsup.model import LrSchedule, ModelConfig, init_model, save_model

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--quick", action="store_true")
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--save", default=None, help="write the seed checkpoint here")
args = ap.parse_args()

gen = GeneratorConfig(seed=args.seed)
if args.quick:
    gen = GeneratorConfig(seed=args.seed, train_speakers=10, train_utts=20, test_speakers=4,
                          test_utts=10)
phones = PhoneSet(gen.num_phones)
train_c = make_train_corpus(gen)
print(f"{len(train_c)} training utterances from {len(train_c.speakers)} speakers")

lm = estimate_phone_lm([u.transcript for u in train_c], 3, gen.num_phones)
den = compile_denominator(lm, phones)
graph = compile_decoding_graph(lm, phones)

model = init_model(ModelConfig(input_dim=gen.feat_dim, num_outputs=gen.num_phones, seed=args.seed))
items = transcript_items(model, train_c, phones, tolerance=2, lm=lm)
t0 = time.time()
model, trace = train(model, items, den, LrSchedule.fixed(0.05, 5, len(items)), l2=2e-3,
                     rng=np.random.default_rng(args.seed))
for row in trace:
    print(f"epoch {row['epoch']}: objective/utt {row['objective'] / row['utts']:.3f}, "
          f"worst utterance {row['max_term']:.3f}")
print(f"trained in {time.time() - t0:.0f}s")
model.metadata["last_lr"] = 0.05

# Seed PER for a sweep of test mismatch; it should not go down as kappa grows.
dcfg = DecodeConfig(beam=16, lattice_beam=8)
for kappa in (0.0, 0.5, 1.0, 2.0):
    test = make_test_corpus(gen, kappa)
    res = decode_corpus(model, test, graph, dcfg, phones)
    per = score(transcripts(res), references(test), missing_as_empty=True).rate
    print(f"kappa {kappa:.1f}: PER {100 * per:5.1f}%")

if args.save:
    save_model(model, args.save)
