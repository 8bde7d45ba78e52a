"""
Outcome vectors and the two preference probabilities
=====================================================

A pair that wins on the weighted sum can still lose on one axis.  The
outcome vector records that per axis, and the sign-corrected probability
never falls below the plain Bradley-Terry one.
"""

import numpy as np

from mcdpo.preference import (aggregate_reward, bt_prob, compute_outcome_vector,
                              decode_outcome, disentangled_bt_prob, encode_outcome)

# two images scored on (aesthetic, semantic)
r_w = np.array([1.2, 0.1])
r_l = np.array([0.3, 0.6])
w = np.array([0.5, 0.5])

gamma = compute_outcome_vector(r_w, r_l)
print("aggregate rewards:", aggregate_reward(r_w, w), aggregate_reward(r_l, w))
print("outcome vector   :", gamma, "->", encode_outcome(gamma))

# the winner loses on the second axis, so the two probabilities differ
print("plain BT         :", bt_prob(r_w, r_l, w))
print("sign-corrected BT:", disentangled_bt_prob(r_w, r_l, w, gamma))

# without an inverted axis they agree exactly
agree_l = np.array([0.3, 0.0])
g2 = compute_outcome_vector(r_w, agree_l)
print("no conflict      :", bt_prob(r_w, agree_l, w), disentangled_bt_prob(r_w, agree_l, w, g2))

# on disk the vector is a W/L/T string
print(decode_outcome("WLT"))
