"""
Checking the CRF against enumeration
====================================

The linear-chain CRF computes its partition function with a log-space
forward pass and decodes with Viterbi. On a short sentence we can list
every label path and compare both numbers directly.
"""

import numpy as np

from grn.crf import brute_force_check, forward_algorithm, viterbi

rng = np.random.default_rng(0)
T, L = 5, 4

# emissions are [B, T, L]; transitions carry an extra START row and STOP column
emissions = rng.standard_normal((1, T, L))
transitions = rng.standard_normal((L + 1, L + 1))
mask = np.ones((1, T), dtype=bool)

_, log_z = forward_algorithm(emissions, transitions, mask)
paths, best = viterbi(emissions, transitions, mask)
ref_log_z, ref_path, ref_best = brute_force_check(emissions[0], transitions)

print(f"log Z forward     {log_z[0]:.12f}")
print(f"log Z enumerated  {ref_log_z:.12f}")
print(f"viterbi path {paths[0]}  score {best[0]:.6f}")
print(f"best enumerated  {ref_path}  score {ref_best:.6f}")

###############################################################################
# Padding a sentence must not change anything: positions past the true
# length are simply skipped.

padded = np.concatenate([emissions, rng.standard_normal((1, 3, L))], axis=1)
padded_mask = np.arange(T + 3)[None] < T
_, log_z_padded = forward_algorithm(padded, transitions, padded_mask)
print("padding leaves log Z unchanged:", log_z_padded[0] == log_z[0])
