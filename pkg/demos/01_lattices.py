"""Lattice basics: posteriors, best path, pruning and confidence.

A lattice here is time-synchronous: every arc consumes exactly one frame,
so all paths have the same length.  We build a small one by hand, look at
its arc posteriors, then prune it and watch the best path survive.
"""

import math

import numpy as np

from latsup.lattice import (Arc, Lattice, best_path, forward_backward, lattice_to_string,
                            prune, random_lattice, utterance_confidence)

# Two frames, two competing hypotheses in each.  Arc fields are
# (src, dst, label, frame, graph_weight, acoustic_weight), natural-log scores.
arcs = [
    Arc(0, 1, 1, 0, math.log(0.6), -1.0),
    Arc(0, 1, 2, 0, math.log(0.4), -0.7),
    Arc(1, 2, 3, 1, math.log(0.9), -2.0),
    Arc(1, 2, 1, 1, math.log(0.1), -0.5),
]
lat = Lattice(3, arcs, final=2, num_frames=2)

post = forward_backward(lat)
print(f"log Z = {post.total_logZ:.4f}")
for a, p in zip(arcs, post.arc_posterior):
    print(f"  frame {a.frame} label {a.label}: posterior {p:.3f}")

bp = best_path(lat)
print("best path labels:", bp.label.tolist())
print(f"utterance confidence (mean best-path posterior) = {utterance_confidence(lat):.3f}")

# A bigger random lattice.  Beam 0 leaves only the best path; an
# infinite beam leaves everything.
rng = np.random.default_rng(7)
big = random_lattice(rng, num_frames=10, max_width=4)
print(f"\nrandom lattice: {big.num_arcs} arcs over {big.num_frames} frames")
for beam in (0.0, 0.5, 2.0, 5.0, math.inf):
    kept = prune(big, beam)
    print(f"  beam {beam:>4}: {kept.num_arcs:3d} arcs, logZ {forward_backward(kept).total_logZ:.3f}")
assert prune(big, 0.0).arc_tuples() == best_path(big).arc_tuples()

# Lattices have a plain text form, one arc per line.
print("\n" + lattice_to_string(lat))
