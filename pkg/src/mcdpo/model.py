"""Toy epsilon-predictor with a zero-initialized reward-conditioning pathway.

The network predicts noise as

    eps_hat = base(x_t, t, c) + gate_lambda * reward_pathway(e_gamma, c, x_t, t)

``base`` is a tanh MLP over ``[x_t, time features, prompt embedding]``.  The
reward pathway embeds the outcome vector (one learned vector per dimension and
outcome; ties embed to zero), mixes it with the prompt embedding, then with the
noisy sample, and projects to data space through a zero-initialized layer.
Both mixing stages are bilinear: ``tanh(uA + vB + (uP) * (vQ) + b)``.

Gradients are computed by hand; every forward pass that needs a gradient
returns a :class:`Tape` consumed by :meth:`ToyDenoiser.backward`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NULL_PROMPT = -1
N_TIME_FREQS = 8
CHECKPOINT_MAGIC = b"MCDPO-CKPT\n"
CHECKPOINT_VERSION = 1


class ParamGradient(dict):
    """Mapping of parameter name to partial derivatives, in declaration order."""

    def __add__(self, other):
        return ParamGradient((k, v + other[k]) for k, v in self.items())

    def __mul__(self, k):
        return ParamGradient((name, v * k) for name, v in self.items())

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()])

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.values())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


def time_features(t, T: int) -> np.ndarray:
    """Sinusoidal features of ``t / T`` at 8 geometric frequencies -> (N, 16)."""
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    freqs = 0.5 * np.pi * np.geomspace(1.0, 64.0, N_TIME_FREQS)
    ang = s * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _mix_forward(u, v, A, B, P, Q, b):
    pu = u @ P
    qv = v @ Q
    h = np.tanh(u @ A + v @ B + pu * qv + b)
    return h, (u, v, pu, qv, h)


def _mix_backward(cache, gh, A, B, P, Q):
    u, v, pu, qv, h = cache
    gp = gh * (1.0 - h * h)
    gpu = gp * qv
    gqv = gp * pu
    grads = {
        "A": u.T @ gp, "B": v.T @ gp, "P": u.T @ gpu, "Q": v.T @ gqv,
        "b": gp.sum(axis=0),
    }
    gu = gp @ A.T + gpu @ P.T
    gv = gp @ B.T + gqv @ Q.T
    return grads, gu, gv


@dataclass
class Tape:
    """Forward record needed to backpropagate one batch."""
    model_id: int
    c_idx: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    base_in: np.ndarray
    hidden: list
    sa_cache: tuple
    ca_cache: tuple
    h_ca: np.ndarray


class ToyDenoiser:
    """Fully connected denoiser ``eps_theta(x_t, t, c, gamma)``.

    Parameters
    ----------
    d : int
        Data dimension.
    D : int
        Number of reward dimensions (length of the outcome vector).
    n_prompts : int
        Prompt vocabulary size; one extra learned row is the null prompt.
    T : int
        Timestep count, used to normalize the time features.
    """

    def __init__(self, d: int, D: int, n_prompts: int, T: int, hidden: int = 64,
                 depth: int = 3, prompt_dim: int = 8, reward_dim: int = 16,
                 mix_dim: int = 32, gate_lambda: float = 1.0, seed: int = 0):
        if min(d, D, n_prompts, T, hidden, depth, prompt_dim, reward_dim, mix_dim) < 1:
            raise ValueError("all model dimensions must be positive")
        self.d, self.D, self.n_prompts, self.T = int(d), int(D), int(n_prompts), int(T)
        self.hidden, self.depth = int(hidden), int(depth)
        self.prompt_dim, self.reward_dim, self.mix_dim = int(prompt_dim), int(reward_dim), int(mix_dim)
        self.gate_lambda = float(gate_lambda)
        self.trainable = True
        self.params = self._init_params(np.random.default_rng(seed))

    # -- construction -----------------------------------------------------
    def _init_params(self, rng):
        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

        n_time = 2 * N_TIME_FREQS
        n_in = self.d + n_time + self.prompt_dim
        n_ctx = self.d + n_time
        k, m = self.reward_dim, self.mix_dim
        p = {"base.prompt_emb": rng.normal(0.0, 1.0, size=(self.n_prompts + 1, self.prompt_dim))}
        width = n_in
        for layer in range(1, self.depth + 1):
            p[f"base.W{layer}"] = dense(width, self.hidden)
            p[f"base.b{layer}"] = np.zeros(self.hidden)
            width = self.hidden
        p["base.W_out"] = dense(width, self.d)
        p["base.b_out"] = np.zeros(self.d)
        p["reward.emb_win"] = rng.normal(0.0, 1.0, size=(self.D, k))
        p["reward.emb_lose"] = rng.normal(0.0, 1.0, size=(self.D, k))
        for stage, (nu, nv) in (("sa", (k, self.prompt_dim)), ("ca", (m, n_ctx))):
            p[f"reward.{stage}_A"] = dense(nu, m)
            p[f"reward.{stage}_B"] = dense(nv, m)
            p[f"reward.{stage}_P"] = 0.5 * dense(nu, m)
            p[f"reward.{stage}_Q"] = 0.5 * dense(nv, m)
            p[f"reward.{stage}_b"] = np.zeros(m)
        p["reward.proj_W"] = np.zeros((m, self.d))
        p["reward.proj_b"] = np.zeros(self.d)
        return p

    @property
    def dims(self) -> dict:
        return {"d": self.d, "D": self.D, "n_prompts": self.n_prompts, "T": self.T}

    @property
    def arch(self) -> dict:
        return {"hidden": self.hidden, "depth": self.depth, "prompt_dim": self.prompt_dim,
                "reward_dim": self.reward_dim, "mix_dim": self.mix_dim}

    def base_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("base.")]

    def reward_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("reward.")]

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "ToyDenoiser":
        return copy.deepcopy(self)

    # -- input handling ---------------------------------------------------
    def _prepare(self, x_t, t, c, gamma):
        x_t = np.asarray(x_t, dtype=np.float64)
        single = x_t.ndim == 1
        x_t = np.atleast_2d(x_t)
        n = x_t.shape[0]
        if x_t.shape[1] != self.d:
            raise ValueError(f"dimension mismatch: expected data dim {self.d}, got {x_t.shape[1]}")
        t = np.broadcast_to(np.asarray(t), (n,))
        if not np.issubdtype(t.dtype, np.integer) or np.any(t < 0) or np.any(t >= self.T):
            raise IndexError(f"timesteps must be integers in [0, {self.T})")
        if c is None:
            c_idx = np.full(n, self.n_prompts)
        else:
            c = np.broadcast_to(np.asarray(c), (n,))
            if np.any((c < NULL_PROMPT) | (c >= self.n_prompts)):
                raise ValueError(f"prompt id out of range [0, {self.n_prompts})")
            c_idx = np.where(c == NULL_PROMPT, self.n_prompts, c)
        if gamma is None:
            g = np.zeros((n, self.D))
        else:
            g = np.asarray(gamma)
            if g.shape[-1] != self.D:
                raise ValueError(f"gamma length {g.shape[-1]} != D={self.D}")
            if np.any((g != -1) & (g != 0) & (g != 1)):
                raise ValueError("gamma entries must be in {-1, 0, +1}")
            g = np.broadcast_to(g, (n, self.D)).astype(np.float64)
        return x_t, t, c_idx, g, single

    # -- forward / backward ----------------------------------------------
    def forward(self, x_t, t, c=None, gamma=None):
        """Batched prediction plus the :class:`Tape` needed by :meth:`backward`."""
        x_t, t, c_idx, g, single = self._prepare(x_t, t, c, gamma)
        p = self.params
        temb = time_features(t, self.T)
        pemb = p["base.prompt_emb"][c_idx]
        base_in = np.concatenate([x_t, temb, pemb], axis=1)
        hidden = []
        h = base_in
        for layer in range(1, self.depth + 1):
            h = np.tanh(h @ p[f"base.W{layer}"] + p[f"base.b{layer}"])
            hidden.append(h)
        out = h @ p["base.W_out"] + p["base.b_out"]

        pos = (g > 0).astype(np.float64)
        neg = (g < 0).astype(np.float64)
        e_gamma = pos @ p["reward.emb_win"] + neg @ p["reward.emb_lose"]
        h_sa, sa_cache = _mix_forward(e_gamma, pemb, *self._mix("sa"))
        ctx = np.concatenate([x_t, temb], axis=1)
        h_ca, ca_cache = _mix_forward(h_sa, ctx, *self._mix("ca"))
        c_reward = h_ca @ p["reward.proj_W"] + p["reward.proj_b"]
        out = out + self.gate_lambda * c_reward
        tape = Tape(id(self), c_idx, pos, neg, base_in, hidden, sa_cache, ca_cache, h_ca)
        return (out[0] if single else out), tape

    def _mix(self, stage):
        p = self.params
        return tuple(p[f"reward.{stage}_{n}"] for n in ("A", "B", "P", "Q", "b"))

    def predict_eps(self, x_t, t, c=None, gamma=None) -> np.ndarray:
        """Noise prediction; ``c=None`` selects the null prompt, ``gamma=None`` all ties."""
        return self.forward(x_t, t, c, gamma)[0]

    def backward(self, tape: Tape | None, grad_out) -> ParamGradient:
        """Exact gradient of ``sum(grad_out * eps_hat)`` w.r.t. every parameter."""
        if tape is None or tape.model_id != id(self):
            raise RuntimeError("backward requires the forward record of this model")
        p = self.params
        g_out = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        grads = {}

        # reward pathway
        g_cr = self.gate_lambda * g_out
        grads["reward.proj_W"] = tape.h_ca.T @ g_cr
        grads["reward.proj_b"] = g_cr.sum(axis=0)
        g_hca = g_cr @ p["reward.proj_W"].T
        A, B, P, Q, _ = self._mix("ca")
        ca_grads, g_hsa, _ = _mix_backward(tape.ca_cache, g_hca, A, B, P, Q)
        A, B, P, Q, _ = self._mix("sa")
        sa_grads, g_e, g_pemb = _mix_backward(tape.sa_cache, g_hsa, A, B, P, Q)
        reward_grads = {
            "reward.emb_win": tape.pos.T @ g_e,
            "reward.emb_lose": tape.neg.T @ g_e,
        }
        for stage, sg in (("sa", sa_grads), ("ca", ca_grads)):
            for n in ("A", "B", "P", "Q", "b"):
                reward_grads[f"reward.{stage}_{n}"] = sg[n]

        # base MLP
        g_h = g_out
        grads["base.W_out"] = tape.hidden[-1].T @ g_h
        grads["base.b_out"] = g_h.sum(axis=0)
        g_h = g_h @ p["base.W_out"].T
        for layer in range(self.depth, 0, -1):
            h = tape.hidden[layer - 1]
            g_pre = g_h * (1.0 - h * h)
            h_in = tape.hidden[layer - 2] if layer > 1 else tape.base_in
            grads[f"base.W{layer}"] = h_in.T @ g_pre
            grads[f"base.b{layer}"] = g_pre.sum(axis=0)
            g_h = g_pre @ p[f"base.W{layer}"].T
        g_pemb = g_pemb + g_h[:, -self.prompt_dim:]
        g_table = np.zeros_like(p["base.prompt_emb"])
        np.add.at(g_table, tape.c_idx, g_pemb)
        grads["base.prompt_emb"] = g_table
        grads.update(reward_grads)
        return ParamGradient((k, grads[k]) for k in p)

    def zero_grad(self) -> ParamGradient:
        return ParamGradient((k, np.zeros_like(v)) for k, v in self.params.items())

    # -- parameter vector view --------------------------------------------
    def get_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ValueError("flat parameter vector has the wrong size")
        i = 0
        for k, v in self.params.items():
            self.params[k] = flat[i:i + v.size].reshape(v.shape).copy()
            i += v.size

    def apply_update(self, step: ParamGradient) -> None:
        """In-place ``params += step``; frozen models refuse."""
        if not self.trainable:
            raise RuntimeError("cannot update a frozen model")
        for k in self.params:
            self.params[k] = self.params[k] + step[k]


def clone_frozen(model: ToyDenoiser) -> ToyDenoiser:
    """Deep copy flagged non-trainable, for use as the reference policy."""
    ref = model.copy()
    ref.trainable = False
    return ref


def merge_parameters(models) -> ToyDenoiser:
    """Element-wise mean of the parameters of shape-congruent models."""
    models = list(models)
    if not models:
        raise ValueError("cannot merge an empty list of models")
    first = models[0]
    for m in models[1:]:
        if m.dims != first.dims or m.arch != first.arch:
            raise ValueError("models are not shape-congruent")
    merged = first.copy()
    merged.trainable = True
    for k in merged.params:
        merged.params[k] = np.mean([m.params[k] for m in models], axis=0)
    return merged


def save_checkpoint(model: ToyDenoiser, path) -> None:
    """Write ``MAGIC``, a one-line JSON header, then raw little-endian float64 blocks."""
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": model.dims,
        "arch": model.arch,
        "gate_lambda": model.gate_lambda,
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> ToyDenoiser:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a model checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    line, _, body = rest.partition(b"\n")
    header = json.loads(line)
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    dims = header["dims"]
    model = ToyDenoiser(dims["d"], dims["D"], dims["n_prompts"], dims["T"],
                        gate_lambda=header["gate_lambda"], **header["arch"])
    offset = 0
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(body[offset:offset + n], dtype="<f8").reshape(shape)
        if block["name"] not in model.params or model.params[block["name"]].shape != shape:
            raise ValueError(f"unexpected parameter block {block['name']}")
        model.params[block["name"]] = arr.astype(np.float64)
        offset += n
    if offset != len(body):
        raise ValueError("trailing bytes in checkpoint")
    return model
