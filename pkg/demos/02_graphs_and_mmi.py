"""From a phone LM to an MMI gradient.

The denominator graph encodes every phone sequence under a phone n-gram
LM.  The numerator encodes the supervision: either a transcript with a
tolerance window around its alignment, or a first-pass lattice.  The
objective is the log ratio of the two summed path scores and its gradient
at the network output is the difference of their occupancies.
"""

import numpy as np

from latsup.graphs import (PhoneSet, compile_denominator, estimate_phone_lm,
                           numerator_from_lattice, numerator_from_transcript)
from latsup.decoder import DecodeConfig, decode_scores
from latsup.lattice import prune
from latsup.lfmmi import grad_check_end_to_end, mmi_loss_and_grad
from latsup.model import ModelConfig, init_model

rng = np.random.default_rng(0)
phones = PhoneSet(4)

# phone 3-gram LM from some random training transcripts
train_text = [list(rng.integers(1, 5, size=int(rng.integers(3, 9)))) for _ in range(200)]
lm = estimate_phone_lm(train_text, order=3, num_phones=4)
den = compile_denominator(lm, phones)
print(f"denominator graph: {den.num_states} states, {den.num_arcs} arcs")
print("P(. | <s> 1) =", np.round(lm.distribution(lm.advance(lm.start_context, 1)), 3))

# A transcript numerator.  The alignment says which phone occupies each
# output frame; tolerance 1 lets every boundary slide by one frame.
alignment = [1, 1, 1, 3, 3, 2, 2, 2]
num, mask = numerator_from_transcript([1, 3, 2], alignment, phones, tolerance=1, lm=lm)
print("frame mask:", [sorted(s) for s in mask.allowed])

outputs = rng.normal(size=(len(alignment), 4))
loss, grad = mmi_loss_and_grad(outputs, (num, mask), den)
print(f"num logZ {loss.num_logz:.3f}  den logZ {loss.den_logz:.3f}  objective {loss.objective:.3f}")
print("gradient rows sum to", np.round(grad.sum(axis=1), 12))

# Lattice supervision: decode the same outputs and use the pruned lattice.
res = decode_scores(outputs, den, DecodeConfig(beam=12, lattice_beam=3), phones)
for beam in (0.0, 3.0):
    lat_num = numerator_from_lattice(prune(res.lattice, beam), tolerance=2)
    l, _ = mmi_loss_and_grad(outputs, lat_num, den)
    print(f"lattice numerator at beam {beam}: objective {l.objective:.3f}")

# The full chain rule, checked against central differences on a toy model.
cfg = ModelConfig(input_dim=3, hidden_dims=(8, 8), splice=((-1, 0, 1),) * 2,
                  strides=(1, 1), subsample=1, num_outputs=4)
model = init_model(cfg)
model.biases[0][:] = 0.1
model.biases[1][:] = 0.1
x = rng.normal(size=(len(alignment) + model.context, 3))
err = grad_check_end_to_end(model, x, (num, mask), den, num_probes=100)
print(f"end-to-end gradient check: max relative error {err:.2e}")
