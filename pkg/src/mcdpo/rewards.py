"""Synthetic multi-axis judges, preference-pair datasets and conflict statistics.

Each reward axis is an analytic function of a 2-d (or d-dimensional) sample
and its prompt id.  Candidate samples come from a prompt-dependent Gaussian
mixture; pairs are labeled globally by a weighted aggregate of the axes,
optionally flipped with probability ``noise`` to mimic a noisy human label.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preference import (aggregate_reward, check_weights, compute_outcome_vector,
                         decode_outcome, encode_outcome)

KINDS = ("target-distance", "direction-projection", "radial-band", "prompt-match")
INGEST_TIE_EPS = 1e-9
DATASET_FORMAT = "mcdpo-pairs"
DATASET_VERSION = 1


@dataclass
class RewardAxis:
    """One analytic judge.

    ``target`` is ``(d,)`` for a prompt-independent point or ``(n_prompts, d)``
    for a prompt-dependent one.  ``modes`` and ``bandwidth`` are used by the
    prompt-match kind, ``radius`` by radial-band, ``direction`` by
    direction-projection.
    """
    name: str
    kind: str
    scale: float = 1.0
    target: np.ndarray | None = None
    direction: np.ndarray | None = None
    radius: float | None = None
    modes: np.ndarray | None = None
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        for attr in ("target", "direction", "modes"):
            val = getattr(self, attr)
            if val is not None:
                setattr(self, attr, np.asarray(val, dtype=np.float64))
        if self.kind == "target-distance" and self.target is None:
            raise ValueError(f"{self.name}: target-distance needs a target")
        if self.kind == "direction-projection":
            if self.direction is None or not np.isclose(np.linalg.norm(self.direction), 1.0):
                raise ValueError(f"{self.name}: direction must be a unit vector")
        if self.kind == "radial-band" and self.radius is None:
            raise ValueError(f"{self.name}: radial-band needs a radius")
        if self.kind == "prompt-match" and self.modes is None:
            raise ValueError(f"{self.name}: prompt-match needs modes")
        if self.bandwidth <= 0:
            raise ValueError(f"{self.name}: bandwidth must be positive")

    def __call__(self, x, c):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        c = np.broadcast_to(np.asarray(c), (x.shape[0],))
        if self.kind == "target-distance":
            mu = self.target if self.target.ndim == 1 else self.target[c]
            r = -np.sum((x - mu) ** 2, axis=1)
        elif self.kind == "direction-projection":
            r = x @ self.direction
        elif self.kind == "radial-band":
            r = -(np.linalg.norm(x, axis=1) - self.radius) ** 2
        else:
            logits = -np.sum((x[:, None, :] - self.modes[None]) ** 2, axis=2) / self.bandwidth
            logits -= logits.max(axis=1, keepdims=True)
            prob = np.exp(logits)
            prob /= prob.sum(axis=1, keepdims=True)
            r = prob[np.arange(x.shape[0]), c]
        return self.scale * r

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "scale": self.scale, "bandwidth": self.bandwidth}
        for attr in ("target", "direction", "modes"):
            val = getattr(self, attr)
            if val is not None:
                out[attr] = val.tolist()
        if self.radius is not None:
            out["radius"] = self.radius
        return out


@dataclass
class CandidateMixture:
    """Prompt-dependent isotropic Gaussian mixture, ``means`` is ``(n_prompts, K, d)``."""
    means: np.ndarray
    std: float

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.ndim != 3:
            raise ValueError("mixture means must have shape (n_prompts, K, d)")
        if self.std <= 0:
            raise ValueError("mixture std must be positive")

    def sample(self, c: int, rng, size=None) -> np.ndarray:
        k = rng.integers(self.means.shape[1], size=size)
        noise = rng.normal(size=(self.means.shape[2],) if size is None else (size, self.means.shape[2]))
        return self.means[c, k] + self.std * noise

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "std": self.std}


@dataclass
class RewardSpec:
    axes: list[RewardAxis]
    mixture: CandidateMixture
    n_prompts: int = field(init=False)
    d: int = field(init=False)

    def __post_init__(self):
        if not self.axes:
            raise ValueError("a reward spec needs at least one axis")
        self.n_prompts, _, self.d = self.mixture.means.shape

    @property
    def D(self) -> int:
        return len(self.axes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.axes]

    def to_dict(self) -> dict:
        return {"axes": [a.to_dict() for a in self.axes], "mixture": self.mixture.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "RewardSpec":
        return cls([RewardAxis(**a) for a in data["axes"]], CandidateMixture(**data["mixture"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def eval_rewards(spec: RewardSpec, x, c) -> np.ndarray:
    """Reward vector(s) for sample(s) ``x`` under prompt(s) ``c``: ``(D,)`` or ``(N, D)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.d:
        raise ValueError(f"dimension mismatch: spec has d={spec.d}, got {x.shape[-1]}")
    out = np.stack([axis(x, c) for axis in spec.axes], axis=1)
    return out[0] if x.ndim == 1 else out


def _ring(n_prompts, radius, offset=0.0):
    ang = 2 * np.pi * np.arange(n_prompts) / n_prompts + offset
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def default_spec() -> RewardSpec:
    """Two axes on 2-d data that pull in opposite directions for half the prompts.

    ``aesthetic`` pulls every sample toward the origin; ``semantic`` pulls
    toward a prompt-specific point, outward of the candidate mode for even
    prompts (conflict) and inward for odd prompts (agreement).
    """
    n_prompts = 4
    unit = _ring(n_prompts, 1.0)
    modes = 1.5 * unit
    sem_radius = np.where(np.arange(n_prompts) % 2 == 0, 2.5, 1.0)[:, None]
    axes = [
        RewardAxis("aesthetic", "target-distance", scale=1.0, target=np.zeros(2)),
        RewardAxis("semantic", "target-distance", scale=0.5, target=sem_radius * unit),
    ]
    return RewardSpec(axes, CandidateMixture(modes[:, None, :], std=0.6))


def five_dim_spec() -> RewardSpec:
    """Five axes mirroring a human label plus four automatic judges.

    Geometry is set so ``pick_like``/``aesthetic_like`` are nearly
    uncorrelated and ``pick_like``/``hps_like`` moderately correlated.
    """
    n_prompts = 4
    unit = _ring(n_prompts, 1.0)
    modes = 1.5 * unit
    axes = [
        RewardAxis("human", "target-distance", scale=0.3, target=1.2 * unit),
        RewardAxis("pick_like", "prompt-match", scale=1.0, modes=modes, bandwidth=1.0),
        RewardAxis("aesthetic_like", "radial-band", scale=1.0, radius=1.5),
        RewardAxis("hps_like", "target-distance", scale=0.5, target=_ring(n_prompts, 2.0, 0.5)),
        RewardAxis("clip_like", "direction-projection", scale=0.3,
                   direction=np.array([np.sqrt(0.5), np.sqrt(0.5)])),
    ]
    return RewardSpec(axes, CandidateMixture(modes[:, None, :], std=0.6))


@dataclass
class PreferencePair:
    x_w: np.ndarray | None
    x_l: np.ndarray | None
    c: int
    rewards_w: np.ndarray
    rewards_l: np.ndarray
    gamma_wl: np.ndarray
    gamma_lw: np.ndarray
    label_source: str = "aggregate"

    def __post_init__(self):
        if not np.array_equal(self.gamma_lw, -self.gamma_wl):
            raise ValueError("gamma_lw must equal -gamma_wl")
        if self.label_source not in ("aggregate", "injected-human"):
            raise ValueError(f"unknown label source {self.label_source!r}")

    def is_conflict(self) -> bool:
        return bool(np.any(self.gamma_wl > 0) and np.any(self.gamma_wl < 0))

    def to_record(self) -> dict:
        rec = {"c": int(self.c)}
        if self.x_w is not None:
            rec["x_w"] = self.x_w.tolist()
            rec["x_l"] = self.x_l.tolist()
        rec.update({
            "rewards_w": self.rewards_w.tolist(), "rewards_l": self.rewards_l.tolist(),
            "gamma_wl": encode_outcome(self.gamma_wl), "gamma_lw": encode_outcome(self.gamma_lw),
            "label_source": self.label_source,
        })
        return rec

    @classmethod
    def from_record(cls, rec: dict, tie_eps: float | None = None) -> "PreferencePair":
        r_w = np.asarray(rec["rewards_w"], dtype=np.float64)
        r_l = np.asarray(rec["rewards_l"], dtype=np.float64)
        if tie_eps is None and "gamma_wl" in rec:
            g = decode_outcome(rec["gamma_wl"])
        else:
            g = compute_outcome_vector(r_w, r_l, INGEST_TIE_EPS if tie_eps is None else tie_eps)
        x_w = np.asarray(rec["x_w"], dtype=np.float64) if "x_w" in rec else None
        x_l = np.asarray(rec["x_l"], dtype=np.float64) if "x_l" in rec else None
        return cls(x_w, x_l, int(rec.get("c", 0)), r_w, r_l, g, -g,
                   rec.get("label_source", "injected-human"))


@dataclass
class PairBatch:
    """Stacked arrays for a batch of pairs, the form consumed by the losses."""
    x_w: np.ndarray
    x_l: np.ndarray
    c: np.ndarray
    gamma_wl: np.ndarray

    def __len__(self):
        return self.x_w.shape[0]

    @property
    def gamma_lw(self) -> np.ndarray:
        return -self.gamma_wl

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.x_w[idx], self.x_l[idx], self.c[idx], self.gamma_wl[idx])


def stack_pairs(pairs) -> PairBatch:
    pairs = list(pairs)
    if any(p.x_w is None for p in pairs):
        raise ValueError("pairs without samples cannot be used for training")
    return PairBatch(
        np.stack([p.x_w for p in pairs]), np.stack([p.x_l for p in pairs]),
        np.array([p.c for p in pairs]), np.stack([p.gamma_wl for p in pairs]).astype(np.int8),
    )


def _make_pair(spec, rng, conflict_knob, label_weights, noise, max_tries):
    c = int(rng.integers(spec.n_prompts))
    force = rng.random() < conflict_knob
    for _ in range(max_tries):
        a = spec.mixture.sample(c, rng)
        b = spec.mixture.sample(c, rng)
        r_a, r_b = eval_rewards(spec, a, c), eval_rewards(spec, b, c)
        g = compute_outcome_vector(r_a, r_b)
        if not force or (np.any(g > 0) and np.any(g < 0)):
            break
    else:
        force = None  # exhausted
    flip = rng.random() < noise
    a_wins = aggregate_reward(r_a, label_weights) >= aggregate_reward(r_b, label_weights)
    if flip:
        a_wins = not a_wins
    if not a_wins:
        a, b, r_a, r_b, g = b, a, r_b, r_a, -g
    source = "aggregate" if noise == 0 else "injected-human"
    return PreferencePair(a, b, c, r_a, r_b, g, -g, source), force is None


def generate_dataset(spec: RewardSpec, n_pairs: int, conflict_knob: float = 0.0,
                     label_weights=None, noise: float = 0.0, seed: int = 0,
                     max_tries: int = 64) -> list[PreferencePair]:
    """Sample labeled pairs; pair ``i`` uses its own RNG stream ``(seed, i)``.

    With probability ``conflict_knob`` a pair is redrawn (up to ``max_tries``
    times) until it is a reward conflict, so the realized conflict rate grows
    monotonically from the reward spec's natural base rate toward 1.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    if not 0.0 <= conflict_knob <= 1.0 or not 0.0 <= noise <= 1.0:
        raise ValueError("conflict_knob and noise must lie in [0, 1]")
    w = check_weights(np.full(spec.D, 1.0 / spec.D) if label_weights is None else label_weights)
    pairs, exhausted = [], 0
    for i in range(n_pairs):
        pair, failed = _make_pair(spec, np.random.default_rng([seed, i]), conflict_knob, w,
                                  noise, max_tries)
        pairs.append(pair)
        exhausted += failed
    if exhausted:
        rate = float(np.mean([p.is_conflict() for p in pairs]))
        warnings.warn(f"conflict knob {conflict_knob} infeasible for {exhausted} pairs; "
                      f"achieved conflict rate {rate:.3f}", RuntimeWarning, stacklevel=2)
    return pairs


def conflict_knob_sweep(spec: RewardSpec, knobs, seeds=(0, 1, 2), n_pairs: int = 500) -> np.ndarray:
    """Monte-Carlo calibration table mapping knob to realized conflict rate.

    Returns an array of shape ``(len(knobs), len(seeds))``.
    """
    out = np.empty((len(knobs), len(seeds)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i, k in enumerate(knobs):
            for j, s in enumerate(seeds):
                pairs = generate_dataset(spec, n_pairs, conflict_knob=float(k), seed=int(s))
                out[i, j] = np.mean([p.is_conflict() for p in pairs])
    return out


def filter_conflict_free(pairs) -> list[PreferencePair]:
    """Pairs whose winner does not lose on any dimension (ties allowed)."""
    return [p for p in pairs if not np.any(p.gamma_wl < 0)]


@dataclass
class ConflictStats:
    pearson: np.ma.MaskedArray
    conflict_rate: float
    per_dim_agreement: np.ndarray
    n_pairs: int


def pearson_matrix(R) -> np.ma.MaskedArray:
    """Pearson correlations of the columns of ``R``; constant columns are masked."""
    R = np.asarray(R, dtype=np.float64)
    Rc = R - R.mean(axis=0)
    constant = np.all(R == R[0], axis=0)
    ss = np.sum(Rc * Rc, axis=0)
    denom = np.sqrt(np.outer(ss, ss))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (Rc.T @ Rc) / denom
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    mask = constant[:, None] | constant[None, :]
    corr[mask] = 0.0
    return np.ma.MaskedArray(corr, mask=mask)


def compute_conflict_stats(pairs) -> ConflictStats:
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("need at least two pairs")
    R = np.concatenate([np.stack([p.rewards_w for p in pairs]),
                        np.stack([p.rewards_l for p in pairs])])
    G = np.stack([p.gamma_wl for p in pairs])
    conflict = np.any(G > 0, axis=1) & np.any(G < 0, axis=1)
    return ConflictStats(pearson_matrix(R), float(conflict.mean()),
                         (G > 0).mean(axis=0), len(pairs))


def save_pairs(path, pairs, spec_hash: str = "", seed: int | None = None, names=None) -> None:
    pairs = list(pairs)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "spec_hash": spec_hash,
              "seed": seed, "n_pairs": len(pairs), "dimension_names": names,
              "outcome_encoding": {"W": 1, "L": -1, "T": 0}}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for p in pairs:
            fh.write(json.dumps(p.to_record()) + "\n")


def load_pairs(path, tie_eps: float | None = None) -> tuple[dict, list[PreferencePair]]:
    """Read a dataset file.  Files without a header line are treated as externally
    produced reward records and their outcome vectors are recomputed with
    ``INGEST_TIE_EPS``."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    first = json.loads(lines[0]) if lines else {}
    if first.get("format") == DATASET_FORMAT:
        header, body = first, lines[1:]
    else:
        header, body = {"format": "external"}, lines
        tie_eps = INGEST_TIE_EPS if tie_eps is None else tie_eps
    return header, [PreferencePair.from_record(json.loads(ln), tie_eps) for ln in body]
