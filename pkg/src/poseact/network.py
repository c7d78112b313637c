"""Lightweight action-decision CNN with attention-weighted pooling.

Layout is NHWC throughout. Five stride-2 3x3 convolutions (16, 32, 64, 64,
128 channels, leaky ReLU) turn an n x n x 8 patch stack into an m x m x 128
embedding (m = n / 32). A 1x1 projection + sigmoid gives the attention map,
whose renormalized weights pool the embedding; two fully connected layers
produce the 13 action logits.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

CHANNELS = (16, 32, 64, 64, 128)
IN_CHANNELS = 8
HIDDEN = 64
N_OUT = 13
LEAK = 0.1
CHECKPOINT_MAGIC = b"PACTNET\0"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def param_shapes(channels=CHANNELS, in_channels=IN_CHANNELS, hidden=HIDDEN) -> dict:
    shapes = {}
    c_in = in_channels
    for i, c in enumerate(channels):
        shapes[f"conv{i}.w"] = (3, 3, c_in, c)
        shapes[f"conv{i}.b"] = (c,)
        c_in = c
    shapes["att.w"] = (c_in,)
    shapes["att.b"] = (1,)
    shapes["fc1.w"] = (c_in, hidden)
    shapes["fc1.b"] = (hidden,)
    shapes["fc2.w"] = (hidden, N_OUT)
    shapes["fc2.b"] = (N_OUT,)
    return shapes


def init_params(rng: np.random.Generator, dtype=np.float32, zero_last: bool = True,
                channels=CHANNELS) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases; zero final layer by default."""
    params = {}
    for name, shape in param_shapes(channels).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
        limit = math.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    if zero_last:
        params["fc2.w"][:] = 0
    return params


# -- layers -------------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3, stride 2, pad 1 patches of an NHWC tensor: (N*Ho*Wo, 9*C)."""
    N, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    s = xp.strides
    win = as_strided(xp, (N, Ho, Wo, 3, 3, C), (s[0], 2 * s[1], 2 * s[2], s[1], s[2], s[3]),
                     writeable=False)
    return np.ascontiguousarray(win).reshape(N * Ho * Wo, 9 * C)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    N, H, W, C = shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    d = dcols.reshape(N, Ho, Wo, 3, 3, C)
    dxp = np.zeros((N, H + 2, W + 2, C), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + 2 * Ho:2, j:j + 2 * Wo:2, :] += d[:, :, :, i, j, :]
    return dxp[:, 1:H + 1, 1:W + 1, :]


def _leaky(x):
    return np.where(x > 0, x, LEAK * x)


def _leaky_grad(pre, g):
    return np.where(pre > 0, g, LEAK * g)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def preprocess(stack: np.ndarray, dtype=np.float32) -> np.ndarray:
    x = np.asarray(stack, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != IN_CHANNELS:
        raise ShapeError(f"expected (N, n, n, {IN_CHANNELS}) input, got {x.shape}")
    return x - 0.5


def forward(params: dict, stack: np.ndarray, keep_cache: bool = False):
    """Logits (N, 13) and attention map (N, m, m); optionally the backprop cache."""
    x = preprocess(stack, params["conv0.w"].dtype)
    n_conv = sum(1 for k in params if k.startswith("conv") and k.endswith(".w"))
    cache = {"shapes": [], "cols": [], "pre": []}
    h = x
    for i in range(n_conv):
        w = params[f"conv{i}.w"]
        if w.shape[2] != h.shape[-1]:
            raise ShapeError(f"conv{i} expects {w.shape[2]} channels, got {h.shape[-1]}")
        N, H, W, _ = h.shape
        cols = _im2col(h)
        pre = cols @ w.reshape(-1, w.shape[-1]) + params[f"conv{i}.b"]
        pre = pre.reshape(N, (H + 1) // 2, (W + 1) // 2, -1)
        if keep_cache:
            cache["shapes"].append(h.shape)
            cache["cols"].append(cols)
            cache["pre"].append(pre)
        h = _leaky(pre)
    N, m1, m2, C = h.shape
    emb = h.reshape(N, m1 * m2, C)
    score = emb @ params["att.w"] + params["att.b"][0]  # (N, P)
    att = _sigmoid(score)
    # att / sum(att), computed from log-sigmoid so saturated maps stay finite
    log_att = -np.logaddexp(0.0, -score)
    alpha = np.exp(log_att - log_att.max(axis=1, keepdims=True))
    alpha /= alpha.sum(axis=1, keepdims=True)
    pooled = np.einsum("np,npc->nc", alpha, emb)
    pre1 = pooled @ params["fc1.w"] + params["fc1.b"]
    hid = _leaky(pre1)
    logits = hid @ params["fc2.w"] + params["fc2.b"]
    if keep_cache:
        cache.update(emb=emb, att=att, alpha=alpha, pooled=pooled, pre1=pre1, hid=hid,
                     emb_shape=h.shape)
        return logits, att.reshape(N, m1, m2), cache
    return logits, att.reshape(N, m1, m2)


def backward(params: dict, cache: dict, dlogits: np.ndarray, input_grad: bool = False) -> dict:
    """Gradients of sum(dlogits * logits) w.r.t. every parameter (and ``"input"``)."""
    g = {}
    hid, pre1, pooled = cache["hid"], cache["pre1"], cache["pooled"]
    emb, att, alpha = cache["emb"], cache["att"], cache["alpha"]
    g["fc2.w"] = hid.T @ dlogits
    g["fc2.b"] = dlogits.sum(axis=0)
    dpre1 = _leaky_grad(pre1, dlogits @ params["fc2.w"].T)
    g["fc1.w"] = pooled.T @ dpre1
    g["fc1.b"] = dpre1.sum(axis=0)
    dpooled = dpre1 @ params["fc1.w"].T                      # (N, C)
    demb = alpha[:, :, None] * dpooled[:, None, :]           # via pooling
    dalpha = np.einsum("npc,nc->np", emb, dpooled)
    ds = alpha * (1.0 - att) * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    g["att.w"] = np.einsum("np,npc->c", ds, emb)
    g["att.b"] = np.array([ds.sum()], dtype=ds.dtype)
    demb += ds[:, :, None] * params["att.w"][None, None, :]
    dh = demb.reshape(cache["emb_shape"])
    n_conv = len(cache["cols"])
    for i in reversed(range(n_conv)):
        w = params[f"conv{i}.w"]
        dpre = _leaky_grad(cache["pre"][i], dh)
        d2 = dpre.reshape(-1, w.shape[-1])
        g[f"conv{i}.w"] = (cache["cols"][i].T @ d2).reshape(w.shape)
        g[f"conv{i}.b"] = d2.sum(axis=0)
        if i > 0 or input_grad:
            dh = _col2im(d2 @ w.reshape(-1, w.shape[-1]).T, cache["shapes"][i])
    if input_grad:
        g["input"] = dh
    return g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy against integer labels, and d loss / d logits."""
    N = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(N), labels]))
    d = np.exp(logp)
    d[np.arange(N), labels] -= 1.0
    return loss, d / N


def loss_and_grads(params: dict, stacks: np.ndarray, labels: np.ndarray):
    logits, _, cache = forward(params, stacks, keep_cache=True)
    loss, dlogits = cross_entropy(logits.astype(np.float64), np.asarray(labels))
    grads = backward(params, cache, dlogits.astype(logits.dtype))
    return loss, grads, logits


def decide_network(params: dict, stack: np.ndarray) -> int:
    logits, _ = forward(params, stack)
    return int(np.argmax(logits[0]))


class NetworkPolicy:
    """Policy backed by trained parameters; scores are the logits."""

    needs_stack = True

    def __init__(self, params: dict):
        self.params = params

    def scores(self, ctx) -> np.ndarray:
        logits, _ = forward(self.params, ctx.stack)
        return logits[0].astype(np.float64)

    def __call__(self, ctx) -> int:
        return int(np.argmax(self.scores(ctx)))


# -- training -------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    decay: float = 0.95
    decay_every: int = 1000
    total_steps: int = 25_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.decay ** (step // self.decay_every)


class AdamState:
    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def train_step(params: dict, batch, cfg: TrainConfig, step_index: int,
               state: AdamState) -> tuple[dict, float]:
    """One Adam update on a batch of (stack, label) pairs; updates in place."""
    stacks, labels = batch
    loss, grads, _ = loss_and_grads(params, stacks, labels)
    if not math.isfinite(loss):
        worst = {k: float(np.max(np.abs(v))) for k, v in grads.items()}
        raise TrainingError(f"non-finite loss at step {step_index}; max |grad| per tensor: {worst}")
    lr = cfg.lr_at(step_index)
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    corr = math.sqrt(1 - b2 ** state.t) / (1 - b1 ** state.t)
    for k, p in params.items():
        gk = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * gk
        v *= b2
        v += (1 - b2) * gk * gk
        p -= (lr * corr) * m / (np.sqrt(v) + cfg.eps)
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"parameter {k} became non-finite at step {step_index}")
    return params, loss


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Magic, u32 header length, JSON header, then little-endian float32 tensors."""
    tensors, offset, blobs = [], 0, []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": CHECKPOINT_VERSION, "dtype": "float32<",
                         "tensors": tensors, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, dtype=np.float32) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a poseact checkpoint")
    (hlen,) = struct.unpack_from("<I", data, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 4
    header = json.loads(data[start:start + hlen])
    if "version" not in header:
        raise ValueError(f"{path}: checkpoint header lacks a version")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    body = start + hlen
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=body + t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(dtype)
    return params, header.get("meta", {})
