"""Outcome vectors, Bradley-Terry probabilities and reward aggregation.

Outcome vectors are integer arrays over ``{-1, 0, +1}`` (lose / tie / win).
On disk they are strings over ``{W, L, T}``, one character per dimension.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_TO_CHAR = {1: "W", -1: "L", 0: "T"}
_FROM_CHAR = {"W": 1, "L": -1, "T": 0}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def check_outcome_vector(gamma) -> np.ndarray:
    g = np.asarray(gamma)
    if np.any((g != -1) & (g != 0) & (g != 1)):
        raise ValueError("outcome vector entries must be in {-1, 0, +1}")
    return g.astype(np.int8)


def check_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or not np.any(w > 0, axis=-1).all():
        raise ValueError("aggregation weights must be nonnegative with at least one positive")
    return w


def uniform_weights(D: int) -> np.ndarray:
    return np.full(D, 1.0 / D)


def compute_outcome_vector(r_x, r_y, tie_eps: float = 0.0) -> np.ndarray:
    """Per-dimension win (+1) / lose (-1) / tie (0) of ``x`` against ``y``.

    Works row-wise on stacked reward vectors of shape ``(N, D)``.
    """
    if tie_eps < 0:
        raise ValueError("tie_eps must be nonnegative")
    r_x, r_y = _pair(r_x, r_y)
    diff = r_x - r_y
    return np.where(diff > tie_eps, 1, np.where(diff < -tie_eps, -1, 0)).astype(np.int8)


def aggregate_reward(r, w) -> np.ndarray | float:
    r, w = _pair(r, np.broadcast_to(check_weights(w), np.shape(r)))
    out = np.sum(w * r, axis=-1)
    return float(out) if out.ndim == 0 else out


def bt_prob(r_w, r_l, w):
    """Standard Bradley-Terry preference probability on the aggregated reward."""
    r_w, r_l = _pair(r_w, r_l)
    w = np.broadcast_to(check_weights(w), r_w.shape)
    return expit(np.sum(w * (r_w - r_l), axis=-1))


def disentangled_bt_prob(r_w, r_l, w, gamma, tie_eps: float = 0.0):
    """Bradley-Terry probability with every dimension's difference sign-corrected.

    ``gamma`` must agree with the signs of ``r_w - r_l`` (as produced by
    :func:`compute_outcome_vector` with the same ``tie_eps``).
    """
    r_w, r_l = _pair(r_w, r_l)
    w = np.broadcast_to(check_weights(w), r_w.shape)
    gamma = check_outcome_vector(gamma)
    if gamma.shape != r_w.shape:
        raise ValueError(f"dimension mismatch: gamma {gamma.shape} vs rewards {r_w.shape}")
    if not np.array_equal(gamma, compute_outcome_vector(r_w, r_l, tie_eps)):
        raise ValueError("gamma is inconsistent with the reward differences")
    return expit(np.sum(w * gamma * (r_w - r_l), axis=-1))


def encode_outcome(gamma) -> str:
    return "".join(_TO_CHAR[int(v)] for v in check_outcome_vector(gamma))


def decode_outcome(s: str) -> np.ndarray:
    try:
        return np.array([_FROM_CHAR[ch] for ch in s], dtype=np.int8)
    except KeyError as exc:
        raise ValueError(f"invalid outcome string {s!r}") from exc
