"""
Imbalance-aware losses on a handful of logits
=============================================

Every loss in ``erclab.losses`` is plain NumPy and returns ``(value, grad)``.
This script pokes at them with small hand-made inputs.
"""

import numpy as np

from erclab.losses import (class_weights, focal_loss, supcon_loss, vs_adjust, vs_loss,
                           weighted_cross_entropy)

np.set_printoptions(precision=4, suppress=True)

# Four utterances, three classes. The last row is confidently right.
logits = np.array([[0.2, 0.1, -0.3],
                   [1.5, -0.5, 0.0],
                   [-1.0, 2.0, 0.5],
                   [6.0, -2.0, -2.0]])
targets = np.array([1, 0, 2, 0])

# Focal loss shrinks the contribution of easy examples. gamma=0 is plain CE.
for gamma in (0.0, 1.0, 2.0, 5.0):
    value, _ = focal_loss(logits, targets, gamma)
    print(f"focal gamma={gamma:<3}  loss={value:.4f}")

# Inverse-frequency weights, N / (N_c * C). A class 26x rarer gets 26x the weight.
counts = np.array([260, 10, 40])
w = class_weights(counts)
print("class weights:", w)
print("weighted CE:  ", weighted_cross_entropy(logits, targets, w)[0])

# VS loss rescales and shifts logits per class before the softmax.
adjusted, scale = vs_adjust(logits, counts, gamma_vs=0.3, tau_vs=1.0)
print("VS scale per class:", scale)
print("adjusted logits, first row:", adjusted[0])
print("VS loss:", vs_loss(logits, targets, counts, 0.3, 1.0, w)[0])

# With balanced counts the additive shift is the same for every class, so
# the softmax cannot see it and VS collapses to weighted CE.
even = np.array([5, 5, 5])
print("balanced VS - CE:", vs_loss(logits, targets, even, 0.3, 1.0, w)[0]
      - weighted_cross_entropy(logits, targets, w)[0])

# Supervised contrastive loss pulls same-label embeddings together.
rng = np.random.default_rng(0)
labels = np.array([0, 0, 1, 1, 2, 2])
centres = rng.normal(size=(3, 8))
tight = centres[labels] + 0.05 * rng.normal(size=(6, 8))
loose = rng.normal(size=(6, 8))
for name, emb in (("clustered", tight), ("random", loose)):
    ex = supcon_loss(emb, labels, tau=0.5, variant="exclude_anchor")[0]
    inc = supcon_loss(emb, labels, tau=0.5, variant="include_anchor")[0]
    print(f"supcon {name:9s} exclude_anchor={ex:.3f} include_anchor={inc:.3f}")
