"""
Self-distillation and margin losses, checked by finite differences
==================================================================

Build a tiny encoder and projection head, evaluate the distillation loss
against an EMA teacher and confirm every gradient numerically.
"""

import numpy as np

from spkdistill import gradcheck
from spkdistill.grad import Tensor, grad_check
from spkdistill.speaker import DinoHead, DinoState, SpeakerEncoder, aam_softmax_loss, dino_loss, update_center

rng = np.random.default_rng(0)
enc, head = SpeakerEncoder(8, (16,), 6), DinoHead(6, 16, 32)
theta = enc.init(rng)
head.init(rng, theta)
state = DinoState.from_student(theta, k_out=32)

view1, view2 = rng.normal(size=(20, 8)), rng.normal(size=(20, 8))
teacher_logits = head.forward(state.teacher, enc.forward(state.teacher, view1, [10, 10])).data


def loss():
    return dino_loss(teacher_logits, head.forward(theta, enc.forward(theta, view2, [10, 10])), state)


print("distillation loss:", float(loss().data))
print("max relative gradient error:", grad_check(loss, [t for _, t in theta.items()]))
update_center(state, teacher_logits)
print("center after one update:", np.round(state.center[:4], 4))

# %%
# Angular-margin softmax on the same embeddings, two speakers.
emb = enc.forward(theta, view2, [10, 10])
weights = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
print("AAM-softmax:", float(aam_softmax_loss(emb, [0, 1], weights, margin=0.2, scale=30.0).data))

# %%
# The packaged suite covers every primitive and both joint objectives.
worst = max(r.max_rel_error for r in gradcheck.run_suite(range(1)))
print("suite worst relative error:", worst)
