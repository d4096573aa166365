"""Minimal neural-network kit: layers with hand-derived backward passes and Adam.

Tensors are plain float64 numpy arrays. Every layer exposes

    forward(x, mode="infer") -> (y, cache)
    backward(grad_out, cache) -> (grad_in, grads)

where ``grads`` is keyed like the layer's ``params`` dict. Backward rules are
written per layer rather than through a graph engine; all of them are checked
against central finite differences in the test suite.

Shape conventions: Dense/LayerNorm act on the last axis; GruLayer and Conv1D
take time-major (T, B, features); MultiHeadSelfAttention takes batch-major
(B, T, dim).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    IoError,
    LabelOutOfRangeError,
    ShapeMismatchError,
    StaleCacheError,
)


# ---------------------------------------------------------------------------
# Elementwise math
# ---------------------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def leaky_relu(x: np.ndarray, slope: float = 0.01):
    y = np.where(x >= 0, x, slope * x)
    return y, (x >= 0, slope)


def leaky_relu_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    pos, slope = cache
    return np.where(pos, grad_out, slope * grad_out)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base class: holds a ``params`` dict of float64 arrays."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def _pack(self, payload):
        return (self, payload)

    def _unpack(self, cache):
        if not (isinstance(cache, tuple) and len(cache) == 2 and cache[0] is self):
            raise StaleCacheError(f"cache does not belong to this {type(self).__name__}")
        return cache[1]


class Dense(Layer):
    """Affine map on the last axis: y = x @ w + b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 init_scale: float = 1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params = {
            "w": init_scale * glorot_uniform(rng, n_in, n_out, (n_in, n_out)),
            "b": np.zeros(n_out),
        }

    def forward(self, x: np.ndarray, mode: str = "infer"):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatchError(f"expected last axis {self.n_in}, got {x.shape}")
        y = x @ self.params["w"] + self.params["b"]
        return y, self._pack(x)

    def backward(self, grad_out: np.ndarray, cache):
        x = self._unpack(cache)
        grad_in = grad_out @ self.params["w"].T
        gw = x.reshape(-1, self.n_in).T @ grad_out.reshape(-1, self.n_out)
        gb = grad_out.reshape(-1, self.n_out).sum(axis=0)
        return grad_in, {"w": gw, "b": gb}


class LayerNorm(Layer):
    """Normalize the last axis to zero mean / unit variance, then affine."""

    def __init__(self, dim: int, eps: float = 1e-8):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.params = {"gain": np.ones(dim), "shift": np.zeros(dim)}

    def forward(self, x: np.ndarray, mode: str = "infer"):
        if x.shape[-1] != self.dim:
            raise ShapeMismatchError(f"expected last axis {self.dim}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        y = self.params["gain"] * xhat + self.params["shift"]
        return y, self._pack((xhat, inv))

    def backward(self, grad_out: np.ndarray, cache):
        xhat, inv = self._unpack(cache)
        flat_g = grad_out.reshape(-1, self.dim)
        flat_x = xhat.reshape(-1, self.dim)
        ggain = (flat_g * flat_x).sum(axis=0)
        gshift = flat_g.sum(axis=0)
        gh = grad_out * self.params["gain"]
        grad_in = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return grad_in, {"gain": ggain, "shift": gshift}


class Embedding(Layer):
    """Integer-id lookup table."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.vocab, self.dim = vocab, dim
        self.params = {"table": glorot_uniform(rng, vocab, dim, (vocab, dim))}

    def forward(self, ids: np.ndarray, mode: str = "infer"):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise LabelOutOfRangeError(f"ids must lie in [0, {self.vocab})")
        return self.params["table"][ids], self._pack(ids)

    def backward(self, grad_out: np.ndarray, cache):
        ids = self._unpack(cache)
        gt = np.zeros_like(self.params["table"])
        np.add.at(gt, ids.ravel(), grad_out.reshape(-1, self.dim))
        return None, {"table": gt}


class Dropout(Layer):
    """Inverted dropout: active only in train mode, identity at inference."""

    def __init__(self, rate: float, seed: int = 0):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def forward(self, x: np.ndarray, mode: str = "infer", rng=None):
        if mode != "train" or self.rate == 0:
            return x, self._pack(None)
        r = rng if rng is not None else self.rng
        mask = (r.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, self._pack(mask)

    def backward(self, grad_out: np.ndarray, cache):
        mask = self._unpack(cache)
        return (grad_out if mask is None else grad_out * mask), {}


class GruLayer(Layer):
    """Single gated recurrent layer over time-major (T, B, n_in) input.

    Gate order in the fused matrices is (reset, update, candidate), with the
    reset gate applied to the recurrent term of the candidate:

        r = sig(x wx_r + h wh_r + b_r)
        z = sig(x wx_z + h wh_z + b_z)
        n = tanh(x wx_n + r * (h wh_n) + b_n)
        h' = (1 - z) * n + z * h

    The initial state is zero, so outputs at time t depend on inputs at
    times <= t only.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_hidden = n_in, n_hidden
        wx = np.concatenate(
            [glorot_uniform(rng, n_in, n_hidden, (n_in, n_hidden)) for _ in range(3)],
            axis=1,
        )
        wh = np.concatenate([orthogonal(rng, n_hidden) for _ in range(3)], axis=1)
        self.params = {"wx": wx, "wh": wh, "b": np.zeros(3 * n_hidden)}

    def forward(self, x: np.ndarray, mode: str = "infer"):
        if x.ndim != 3 or x.shape[-1] != self.n_in:
            raise ShapeMismatchError(f"expected (T, B, {self.n_in}), got {x.shape}")
        T, B, _ = x.shape
        H = self.n_hidden
        pre_x = x @ self.params["wx"] + self.params["b"]
        h = np.zeros((B, H))
        hs = np.empty((T + 1, B, H))
        hs[0] = h
        rs = np.empty((T, B, H))
        zs = np.empty((T, B, H))
        ns = np.empty((T, B, H))
        phn = np.empty((T, B, H))
        for t in range(T):
            ph = h @ self.params["wh"]
            r = sigmoid(pre_x[t, :, :H] + ph[:, :H])
            z = sigmoid(pre_x[t, :, H:2 * H] + ph[:, H:2 * H])
            n = np.tanh(pre_x[t, :, 2 * H:] + r * ph[:, 2 * H:])
            h = (1.0 - z) * n + z * h
            rs[t], zs[t], ns[t], phn[t], hs[t + 1] = r, z, n, ph[:, 2 * H:], h
        return hs[1:].copy(), self._pack((x, rs, zs, ns, phn, hs))

    def backward(self, grad_out: np.ndarray, cache):
        x, rs, zs, ns, phn, hs = self._unpack(cache)
        T, B, _ = x.shape
        H = self.n_hidden
        wh = self.params["wh"]
        dpre_x = np.empty((T, B, 3 * H))
        dwh = np.zeros_like(wh)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh_t = grad_out[t] + dh
            h_prev = hs[t]
            r, z, n = rs[t], zs[t], ns[t]
            dz = dh_t * (h_prev - n) * z * (1.0 - z)
            dn = dh_t * (1.0 - z) * (1.0 - n * n)
            dr = dn * phn[t] * r * (1.0 - r)
            dpre_x[t, :, :H] = dr
            dpre_x[t, :, H:2 * H] = dz
            dpre_x[t, :, 2 * H:] = dn
            dph = np.concatenate([dr, dz, dn * r], axis=1)
            dwh += h_prev.T @ dph
            dh = dh_t * z + dph @ wh.T
        dwx = x.reshape(-1, self.n_in).T @ dpre_x.reshape(-1, 3 * H)
        db = dpre_x.reshape(-1, 3 * H).sum(axis=0)
        grad_in = dpre_x @ self.params["wx"].T
        return grad_in, {"wx": dwx, "wh": dwh, "b": db}


class Conv1D(Layer):
    """1-D convolution over time-major (T, B, n_in) input with zero padding.

    y[t] = sum_k x[t - k + offset] @ w[k] + b, where offset = 0 for the
    causal variant and floor((width - 1) / 2) for the centered one.
    """

    def __init__(self, n_in: int, n_out: int, width: int, causal: bool,
                 rng: np.random.Generator):
        super().__init__()
        if width < 1:
            raise ValueError("kernel width must be at least 1")
        self.n_in, self.n_out, self.width, self.causal = n_in, n_out, width, causal
        fan_in, fan_out = n_in * width, n_out * width
        self.params = {
            "w": glorot_uniform(rng, fan_in, fan_out, (width, n_in, n_out)),
            "b": np.zeros(n_out),
        }

    @property
    def offset(self) -> int:
        return 0 if self.causal else (self.width - 1) // 2

    def forward(self, x: np.ndarray, mode: str = "infer"):
        if x.ndim != 3 or x.shape[-1] != self.n_in:
            raise ShapeMismatchError(f"expected (T, B, {self.n_in}), got {x.shape}")
        T = x.shape[0]
        left = self.width - 1 - self.offset
        xp = np.pad(x, ((left, self.offset), (0, 0), (0, 0)))
        y = np.zeros((T, x.shape[1], self.n_out)) + self.params["b"]
        for k in range(self.width):
            # xp[k:k+T] holds x[t - (width-1-k) + ... ]; pairs with w[width-1-k]
            y += xp[k:k + T] @ self.params["w"][self.width - 1 - k]
        return y, self._pack((x, xp))

    def backward(self, grad_out: np.ndarray, cache):
        x, xp = self._unpack(cache)
        T, B, _ = x.shape
        left = self.width - 1 - self.offset
        gw = np.zeros_like(self.params["w"])
        gxp = np.zeros_like(xp)
        g2 = grad_out.reshape(-1, self.n_out)
        for k in range(self.width):
            gw[self.width - 1 - k] = xp[k:k + T].reshape(-1, self.n_in).T @ g2
            gxp[k:k + T] += grad_out @ self.params["w"][self.width - 1 - k].T
        gb = g2.sum(axis=0)
        return gxp[left:left + T], {"w": gw, "b": gb}


class MultiHeadSelfAttention(Layer):
    """Scaled dot-product self-attention over batch-major (B, T, dim) input."""

    def __init__(self, dim: int, heads: int, causal_mask: bool,
                 rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide dim ({dim})")
        self.dim, self.heads, self.causal = dim, heads, causal_mask
        self.d_head = dim // heads
        self.params = {}
        for name in ("wq", "wk", "wv", "wo"):
            self.params[name] = glorot_uniform(rng, dim, dim, (dim, dim))
            self.params[name.replace("w", "b")] = np.zeros(dim)

    def _split(self, x):
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, h, T, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, h * d)

    def forward(self, x: np.ndarray, mode: str = "infer"):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeMismatchError(f"expected (B, T, {self.dim}), got {x.shape}")
        p = self.params
        q = self._split(x @ p["wq"] + p["bq"])
        k = self._split(x @ p["wk"] + p["bk"])
        v = self._split(x @ p["wv"] + p["bv"])
        scores = q @ k.swapaxes(-1, -2) / np.sqrt(self.d_head)
        if self.causal:
            T = x.shape[1]
            scores = scores + np.triu(np.full((T, T), -1e30), k=1)
        attn = softmax(scores, axis=-1)
        ctx = self._merge(attn @ v)
        y = ctx @ p["wo"] + p["bo"]
        return y, self._pack((x, q, k, v, attn, ctx))

    def backward(self, grad_out: np.ndarray, cache):
        x, q, k, v, attn, ctx = self._unpack(cache)
        p = self.params
        D = self.dim
        flat = lambda a: a.reshape(-1, D)
        grads = {
            "wo": flat(ctx).T @ flat(grad_out),
            "bo": flat(grad_out).sum(axis=0),
        }
        gctx = self._split(grad_out @ p["wo"].T)
        gattn = gctx @ v.swapaxes(-1, -2)
        gv = attn.swapaxes(-1, -2) @ gctx
        gscores = attn * (gattn - (gattn * attn).sum(axis=-1, keepdims=True))
        gscores /= np.sqrt(self.d_head)
        gq = self._merge(gscores @ k)
        gk = self._merge(gscores.swapaxes(-1, -2) @ q)
        gv = self._merge(gv)
        grad_in = gq @ p["wq"].T + gk @ p["wk"].T + gv @ p["wv"].T
        for name, g in (("wq", gq), ("wk", gk), ("wv", gv)):
            grads[name] = flat(x).T @ flat(g)
            grads[name.replace("w", "b")] = flat(g).sum(axis=0)
        return grad_in, grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log softmax probability of the true labels.

    Returns (loss, dloss/dlogits). logits has shape (..., V) and labels the
    matching leading shape.
    """
    labels = np.asarray(labels)
    V = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeMismatchError(f"labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= V):
        raise LabelOutOfRangeError(f"labels must lie in [0, {V})")
    logp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = float(-picked.mean())
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    return loss, (np.exp(logp) - onehot) / labels.size


def mse(x: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient with respect to x."""
    if x.shape != target.shape:
        raise ShapeMismatchError(f"{x.shape} vs {target.shape}")
    diff = x - target
    return float((diff * diff).mean()), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam; updates parameter arrays in place."""

    def __init__(self, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatchError(f"{name}: grad {g.shape} vs param {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest plus a little-endian f32 blob
# ---------------------------------------------------------------------------

def save_checkpoint(directory, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write manifest.json and params.bin into `directory` (created if needed)."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        offset = 0
        with open(d / "params.bin", "wb") as fh:
            for name in sorted(tensors):
                blob = tensors[name].astype("<f4").tobytes(order="C")
                fh.write(blob)
                entries.append({
                    "name": name,
                    "shape": list(tensors[name].shape),
                    "offset": offset,
                    "length": len(blob),
                })
                offset += len(blob)
        doc = dict(manifest)
        doc["tensors"] = entries
        with open(d / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint to {directory}: {exc}") from exc


def load_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint written by :func:`save_checkpoint`; tensors come back float64."""
    d = Path(directory)
    try:
        with open(d / "manifest.json", "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        with open(d / "params.bin", "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint from {directory}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{directory}: invalid manifest JSON") from exc
    tensors = {}
    for entry in doc.get("tensors", []):
        start, length = entry["offset"], entry["length"]
        if start + length > len(blob):
            raise FormatError(f"{directory}: tensor {entry['name']} beyond blob end")
        flat = np.frombuffer(blob[start:start + length], dtype="<f4").astype(np.float64)
        if flat.size != int(np.prod(entry["shape"])):
            raise FormatError(f"{directory}: tensor {entry['name']} shape mismatch")
        tensors[entry["name"]] = flat.reshape(entry["shape"])
    manifest = {k: v for k, v in doc.items() if k != "tensors"}
    return manifest, tensors
