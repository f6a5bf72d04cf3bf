"""
Majority voting with a tiebreaker
=================================

Three or more systems vote per utterance. When the top labels tie, the
designated tiebreaker decides if its own vote is among them; otherwise the
lowest label index wins.
"""

import itertools

import numpy as np

from erclab.ensemble import ablate_combinations, majority_vote

rng = np.random.default_rng(3)
n_utts, n_classes = 200, 4
gold = {f"u{i:03d}": int(rng.integers(n_classes)) for i in range(n_utts)}


def noisy_expert(accuracy):
    """Right with probability ``accuracy``, otherwise a random wrong label."""
    out = {}
    for utt, y in gold.items():
        out[utt] = y if rng.random() < accuracy else int((y + rng.integers(1, n_classes)) % n_classes)
    return out


table = {"S1": noisy_expert(0.55), "S2": noisy_expert(0.65), "S3": noisy_expert(0.5), "S4": noisy_expert(0.6)}

voted = majority_vote(table, tiebreaker="S2")
print("first five votes:", {u: voted[u] for u in sorted(voted)[:5]})

# Score every subset; the strongest single system breaks ties.
subsets = [s for r in range(1, 5) for s in itertools.combinations(sorted(table), r)]
tiebreakers = [max(s, key=lambda e: sum(table[e][u] == gold[u] for u in gold)) for s in subsets]
reports = ablate_combinations(table, subsets, gold, tiebreakers, n_classes)
for subset, tb, rep in sorted(zip(subsets, tiebreakers, reports), key=lambda t: -t[2].macro_f1)[:8]:
    print(f"{'+'.join(subset):12s} tiebreak {tb}  macro-F1 {rep.macro_f1:.3f}  WF1 {rep.weighted_f1:.3f}")
