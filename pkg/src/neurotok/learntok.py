"""Learnable sample-level tokenizer: recurrent encoder, convolutional dictionary decoder.

The encoder (GRU -> dense -> layer norm) turns a single-channel sequence into
per-timestep logits over a V-token vocabulary. Assignments are relaxed during
training by mixing the hard one-hot argmax with a softmax, weighted by an
annealing coefficient that decays linearly from 1 (all soft) to 0 (all hard).
The decoder reconstructs the signal as a weighted, biased sum of per-token
convolution kernels, either centered on each timestep (noncausal) or using
only current and past assignments (causal). Training minimizes reconstruction
MSE with Adam. After training, unused tokens can be dropped and the survivors
relabeled by descending usage, with one extra label reserved for
out-of-vocabulary assignments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nnkit
from .core import TimeSeries
from .errors import EmptyDataError, FormatError, IoError, VocabMismatchError
from .fixedtok import TokenSequence


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear decay of the assignment-relaxation coefficient from 1 to 0."""

    total: float

    def __post_init__(self):
        if self.total <= 0:
            raise ValueError("total must be positive")

    def kappa(self, epoch: float) -> float:
        return float(np.clip(1.0 - epoch / self.total, 0.0, 1.0))


@dataclass(frozen=True)
class RefactorMap:
    """Relabeling of retained tokens: old label -> new label, ordered by usage.

    New labels run 0..v_star-1 in descending usage count; label v_star is
    reserved for assignments that fall outside the retained vocabulary.
    """

    mapping: dict[int, int]
    v_star: int

    def __post_init__(self):
        if len(set(self.mapping.values())) != len(self.mapping):
            raise ValueError("refactor mapping must be injective")
        if sorted(self.mapping.values()) != list(range(self.v_star)):
            raise ValueError("new labels must be exactly 0..v_star-1")

    @property
    def oov_label(self) -> int:
        return self.v_star


@dataclass
class TrainConfig:
    """Training hyperparameters: batch 32, 40 epochs, Adam at 1e-5 by default."""

    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-5
    seed: int = 0


def segment_pool(recordings: list[TimeSeries], seq_len: int, stride: int | None = None) -> np.ndarray:
    """Flatten multichannel recordings into an (N, seq_len) pool of single-channel segments."""
    stride = stride or seq_len
    segs = []
    for ts in recordings:
        n = (ts.n_samples - seq_len) // stride + 1 if ts.n_samples >= seq_len else 0
        for k in range(n):
            segs.append(ts.data[:, k * stride : k * stride + seq_len])
    if not segs:
        raise EmptyDataError("no segments could be extracted")
    return np.concatenate(segs, axis=0)


class LearnableTokenizer:
    """Autoencoder tokenizer over single-channel sequences.

    Tokenization is performed independently for each channel; multichannel
    input is handled by batching channels through the encoder.
    """

    def __init__(self, vocab_size: int = 128, hidden: int = 128, d_token: int = 10,
                 causal: bool = False, seed: int = 0):
        if vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if d_token < 1:
            raise ValueError("d_token must be at least 1")
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.d_token = d_token
        self.causal = causal
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        self.gru = nnkit.GruLayer(1, hidden, rng)
        self.dense = nnkit.Dense(hidden, vocab_size, rng)
        self.norm = nnkit.LayerNorm(vocab_size)
        # dictionary kernels, per-token mixing weights and biases
        fan = d_token * (vocab_size + 1)
        self.kernels = rng.uniform(-np.sqrt(6.0 / fan), np.sqrt(6.0 / fan),
                                   size=(d_token, vocab_size))
        self.mix_w = np.ones(vocab_size)
        self.mix_b = np.zeros(vocab_size)
        self.refactor: RefactorMap | None = None
        self.anneal: AnnealSchedule | None = None
        self.final_loss: float | None = None

    # -- parameter plumbing --------------------------------------------------

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in (("gru", self.gru), ("dense", self.dense), ("norm", self.norm)):
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
        out["dec.kernels"] = self.kernels
        out["dec.mix_w"] = self.mix_w
        out["dec.mix_b"] = self.mix_b
        return out

    @property
    def effective_vocab(self) -> int:
        """Vocabulary size seen by downstream consumers (includes the OOV label)."""
        return self.refactor.v_star + 1 if self.refactor else self.vocab_size

    @property
    def provenance(self) -> str:
        return f"learn-{'causal' if self.causal else 'noncausal'}{self.effective_vocab}"

    # -- encoder / decoder ---------------------------------------------------

    def _encode_batch(self, xb: np.ndarray, kappa: float, want_cache: bool = False):
        """xb: (B, T) -> logits alpha (T, B, V), assignment zeta (T, B, V)."""
        if not 0.0 <= kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        x = xb.T[:, :, None]
        h, c_gru = self.gru.forward(x)
        a, c_dense = self.dense.forward(h)
        alpha, c_norm = self.norm.forward(a)
        p = nnkit.softmax(alpha, axis=-1)
        hard = np.zeros_like(alpha)
        np.put_along_axis(hard, alpha.argmax(axis=-1)[..., None], 1.0, axis=-1)
        zeta = (1.0 - kappa) * hard + kappa * p
        if want_cache:
            return alpha, zeta, (p, c_gru, c_dense, c_norm)
        return alpha, zeta

    def encode(self, x: np.ndarray, kappa: float):
        """Single-channel sequence (T,) -> (logits (V, T), assignment (V, T))."""
        x = np.asarray(x, dtype=np.float64).ravel()
        alpha, zeta = self._encode_batch(x[None, :], kappa)
        return alpha[:, 0, :].T, zeta[:, 0, :].T

    def _decode_batch(self, zeta: np.ndarray) -> np.ndarray:
        """zeta: (T, B, V) -> reconstruction (T, B)."""
        T = zeta.shape[0]
        d = self.d_token
        off = 0 if self.causal else (d - 1) // 2
        u = self.kernels * self.mix_w[None, :]
        zp = np.pad(zeta, ((d - 1 - off, off), (0, 0), (0, 0)))
        out = np.full(zeta.shape[:2], self.mix_b.sum())
        for k in range(d):
            out += zp[k:k + T] @ u[d - 1 - k]
        return out

    def _decode_backward(self, zeta: np.ndarray, grad_out: np.ndarray):
        T = zeta.shape[0]
        d = self.d_token
        off = 0 if self.causal else (d - 1) // 2
        u = self.kernels * self.mix_w[None, :]
        zp = np.pad(zeta, ((d - 1 - off, off), (0, 0), (0, 0)))
        du = np.zeros_like(u)
        gzp = np.zeros_like(zp)
        for k in range(d):
            du[d - 1 - k] = np.einsum("tb,tbv->v", grad_out, zp[k:k + T])
            gzp[k:k + T] += grad_out[:, :, None] * u[d - 1 - k]
        grads = {
            "dec.kernels": du * self.mix_w[None, :],
            "dec.mix_w": (du * self.kernels).sum(axis=0),
            "dec.mix_b": np.full(self.vocab_size, grad_out.sum()),
        }
        return gzp[d - 1 - off:d - 1 - off + T], grads

    def decode(self, zeta: np.ndarray) -> np.ndarray:
        """Assignment matrix (V, T) -> reconstructed sequence (T,)."""
        zeta = np.asarray(zeta, dtype=np.float64)
        if zeta.shape[0] != self.vocab_size:
            raise nnkit.ShapeMismatchError(
                f"expected ({self.vocab_size}, T) assignments, got {zeta.shape}")
        return self._decode_batch(zeta.T[:, None, :])[:, 0]

    # -- training ------------------------------------------------------------

    def _loss_and_grads(self, xb: np.ndarray, kappa: float):
        alpha, zeta, (p, c_gru, c_dense, c_norm) = self._encode_batch(
            xb, kappa, want_cache=True)
        xhat = self._decode_batch(zeta)
        loss, dxhat = nnkit.mse(xhat, xb.T)
        dzeta, grads = self._decode_backward(zeta, dxhat)
        # hard assignments are piecewise constant in alpha; only the soft path flows
        dp = kappa * dzeta
        dalpha = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        da, g_norm = self.norm.backward(dalpha, c_norm)
        dh, g_dense = self.dense.backward(da, c_dense)
        _, g_gru = self.gru.backward(dh, c_gru)
        for prefix, g in (("gru", g_gru), ("dense", g_dense), ("norm", g_norm)):
            for k, v in g.items():
                grads[f"{prefix}.{k}"] = v
        return loss, grads

    def train(self, segments, cfg: TrainConfig | None = None) -> list[float]:
        """Minimize reconstruction MSE over a pool of equal-length segments.

        Returns the per-epoch mean training loss. The relaxation coefficient
        is held constant within an epoch and reaches 0 in the final epoch.
        """
        cfg = cfg or TrainConfig()
        xs = np.atleast_2d(np.asarray(segments, dtype=np.float64))
        if xs.size == 0:
            raise EmptyDataError("no training segments given")
        if cfg.epochs < 1:
            raise ValueError("epochs must be at least 1")
        self.anneal = AnnealSchedule(max(cfg.epochs - 1, 1))
        opt = nnkit.Adam(lr=cfg.lr)
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        params = self.params
        curve = []
        for epoch in range(cfg.epochs):
            kappa = self.anneal.kappa(epoch) if cfg.epochs > 1 else 1.0
            order = rng.permutation(len(xs))
            losses = []
            for start in range(0, len(xs), cfg.batch_size):
                batch = xs[order[start:start + cfg.batch_size]]
                loss, grads = self._loss_and_grads(batch, kappa)
                opt.step(params, grads)
                losses.append(loss)
            curve.append(float(np.mean(losses)))
        self.final_loss = curve[-1]
        return curve

    # -- token interface -----------------------------------------------------

    def _raw_labels(self, ts: TimeSeries) -> np.ndarray:
        """Hard per-channel assignments before any relabeling; shape (C, S)."""
        alpha, _ = self._encode_batch(ts.data, kappa=0.0)
        return alpha.argmax(axis=-1).T  # argmax ties break to the lowest index

    def refactorize(self, data: list[TimeSeries]) -> int:
        """Drop tokens unused on `data`, relabel survivors by descending count.

        Returns the retained count. Reconstructions on `data` are unchanged
        because detokenization maps new labels back to the original kernels.
        """
        counts = np.zeros(self.vocab_size, dtype=np.int64)
        for ts in data:
            counts += np.bincount(self._raw_labels(ts).ravel(), minlength=self.vocab_size)
        used = np.flatnonzero(counts > 0)
        order = used[np.lexsort((used, -counts[used]))]
        self.refactor = RefactorMap({int(old): new for new, old in enumerate(order)},
                                    v_star=len(order))
        return len(order)

    def tokenize(self, ts: TimeSeries) -> TokenSequence:
        """Hard-assign every sample of every channel (relaxation fixed at 0)."""
        labels = self._raw_labels(ts)
        if self.refactor is not None:
            lut = np.full(self.vocab_size, self.refactor.oov_label, dtype=np.int64)
            for old, new in self.refactor.mapping.items():
                lut[old] = new
            labels = lut[labels]
        return TokenSequence(labels, self.effective_vocab, self.provenance,
                             ts.sample_rate, ts.subject_id)

    def detokenize(self, tokens: TokenSequence) -> TimeSeries:
        """Expand labels to one-hot assignments and run the dictionary decoder.

        Out-of-vocabulary labels decode through an all-zero assignment column,
        so they contribute only the shared bias term.
        """
        if tokens.vocab_size != self.effective_vocab:
            raise VocabMismatchError(
                f"token vocabulary {tokens.vocab_size} != tokenizer vocabulary "
                f"{self.effective_vocab}")
        labels = tokens.labels
        if self.refactor is not None:
            inv = np.zeros(self.refactor.v_star + 1, dtype=np.int64)
            for old, new in self.refactor.mapping.items():
                inv[new] = old
            valid = labels != self.refactor.oov_label
            kernel_idx = inv[np.where(valid, labels, 0)]
        else:
            valid = np.ones_like(labels, dtype=bool)
            kernel_idx = labels
        C, S = labels.shape
        zeta = np.zeros((S, C, self.vocab_size))
        t_idx, c_idx = np.meshgrid(np.arange(S), np.arange(C), indexing="ij")
        sel = valid.T
        zeta[t_idx[sel], c_idx[sel], kernel_idx.T[sel]] = 1.0
        recon = self._decode_batch(zeta).T
        return TimeSeries(recon, tokens.sample_rate, tokens.subject_id)

    # -- persistence ----------------------------------------------------------

    def save(self, directory) -> None:
        manifest = {
            "model": "learnable-tokenizer",
            "layers": ["gru", "dense", "norm", "dictionary-decoder"],
        }
        nnkit.save_checkpoint(directory, manifest, self.params)
        sidecar = {
            "type": "learnable",
            "vocab_size": self.vocab_size,
            "hidden": self.hidden,
            "d_token": self.d_token,
            "causal": self.causal,
            "seed": self.seed,
            "v_star": self.refactor.v_star if self.refactor else None,
            "refactor_map": (sorted(self.refactor.mapping.items())
                             if self.refactor else None),
            "anneal_total": self.anneal.total if self.anneal else None,
            "final_loss": self.final_loss,
        }
        try:
            with open(Path(directory) / "tokenizer.json", "w", encoding="utf-8") as fh:
                json.dump(sidecar, fh, indent=1)
        except OSError as exc:
            raise IoError(f"cannot write tokenizer sidecar: {exc}") from exc

    @classmethod
    def load(cls, directory) -> "LearnableTokenizer":
        try:
            with open(Path(directory) / "tokenizer.json", "r", encoding="utf-8") as fh:
                sidecar = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read tokenizer sidecar: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{directory}: invalid tokenizer sidecar") from exc
        tok = cls(
            vocab_size=sidecar["vocab_size"],
            hidden=sidecar["hidden"],
            d_token=sidecar["d_token"],
            causal=sidecar["causal"],
            seed=sidecar.get("seed", 0),
        )
        _, tensors = nnkit.load_checkpoint(directory)
        params = tok.params
        for name, value in tensors.items():
            if name not in params:
                raise FormatError(f"{directory}: unknown tensor {name}")
            if params[name].shape != value.shape:
                raise FormatError(f"{directory}: tensor {name} shape mismatch")
            params[name][...] = value
        if sidecar.get("refactor_map") is not None:
            tok.refactor = RefactorMap(
                {int(o): int(n) for o, n in sidecar["refactor_map"]},
                v_star=sidecar["v_star"],
            )
        if sidecar.get("anneal_total"):
            tok.anneal = AnnealSchedule(sidecar["anneal_total"])
        tok.final_loss = sidecar.get("final_loss")
        return tok


def train_restarts(segments, n_restarts: int, base_seed: int = 0,
                   cfg: TrainConfig | None = None, max_workers: int = 1,
                   **tok_kwargs) -> tuple[LearnableTokenizer, list[list[float]]]:
    """Train `n_restarts` tokenizers with distinct seeds; keep the lowest final loss.

    Restart i uses seed base_seed + i for both initialization and shuffling.
    With max_workers > 1, restarts run as isolated worker processes.
    """
    cfg = cfg or TrainConfig()
    jobs = [(segments, base_seed + i, cfg, tok_kwargs) for i in range(n_restarts)]
    if max_workers > 1 and n_restarts > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(max_workers, n_restarts)) as pool:
            results = list(pool.map(_run_restart, jobs))
    else:
        results = [_run_restart(j) for j in jobs]
    curves = [c for _, c in results]
    best = min(range(len(results)), key=lambda i: results[i][1][-1])
    return results[best][0], curves


def _run_restart(job):
    segments, seed, cfg, tok_kwargs = job
    tok = LearnableTokenizer(seed=seed, **tok_kwargs)
    run_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                          lr=cfg.lr, seed=seed)
    curve = tok.train(segments, run_cfg)
    return tok, curve
