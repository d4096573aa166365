"""Desk-scale decoder-only autoregressive transformer over token sequences.

Each channel of a token window is modeled as its own sequence: attention runs
along time within a channel, and channel identity enters through a learned
channel embedding that is summed with token, position, and subject embeddings.
Blocks are pre-norm residual (self-attention, then a feed-forward expansion),
followed by a final normalization and a prediction head (dense, leaky ReLU,
dropout, dense to vocabulary logits). Training is teacher-forced next-token
cross-entropy with Adam; generation uses nucleus (top-p) sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nnkit
from .errors import (
    ContextTooLongError,
    EmptyDataError,
    EmptyHistogramError,
    FormatError,
    IoError,
    LabelOutOfRangeError,
)
from .fixedtok import TokenSequence


@dataclass
class GptConfig:
    """Model dimensions and training knobs.

    Defaults are a desk-scale configuration (64-dim embeddings, 2 layers,
    2 heads, receptive field 32). A full-scale setup (400-dim embeddings,
    4 layers, 4 heads, receptive field 80, head width 400, dropout 0.2,
    batch size 8, learning rate 1e-5) remains constructible the same way.
    """

    vocab_size: int
    n_channels: int = 1
    n_subjects: int = 1
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    receptive_field: int = 32
    head_hidden: int = 64
    dropout: float = 0.0
    lr: float = 1e-3
    batch_size: int = 8
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("n_heads must divide embed_dim")
        if self.receptive_field < 2:
            raise ValueError("receptive_field must be at least 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")


@dataclass(frozen=True)
class SamplerConfig:
    top_p: float = 0.99
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def nucleus_support(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Indices of the minimal descending-probability prefix with mass >= top_p.

    Ties at the cutoff are resolved by token index (stable sort), so the
    support is deterministic.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, top_p, side="left"))
    return order[: min(cut, len(order) - 1) + 1]


def nucleus_sample(probs: np.ndarray, top_p: float, rng: np.random.Generator) -> int:
    support = nucleus_support(probs, top_p)
    p = probs[support]
    return int(rng.choice(support, p=p / p.sum()))


def sample_prompt(token_counts: np.ndarray, length: int, seed: int = 0) -> np.ndarray:
    """Independent categorical draws proportional to training-set token counts."""
    counts = np.asarray(token_counts, dtype=np.float64)
    if counts.size == 0 or counts.sum() <= 0:
        raise EmptyHistogramError("token histogram is empty")
    if length == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.choice(len(counts), size=length, p=counts / counts.sum()).astype(np.int64)


class GptModel:
    """Decoder-only transformer; see module docstring for the layout."""

    def __init__(self, cfg: GptConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        D = cfg.embed_dim
        self.tok_emb = nnkit.Embedding(cfg.vocab_size, D, rng)
        self.chan_emb = nnkit.Embedding(cfg.n_channels, D, rng)
        self.pos_emb = nnkit.Embedding(cfg.receptive_field, D, rng)
        self.subj_emb = nnkit.Embedding(cfg.n_subjects, D, rng)
        self.blocks = []
        for _ in range(cfg.n_layers):
            self.blocks.append({
                "ln1": nnkit.LayerNorm(D),
                "attn": nnkit.MultiHeadSelfAttention(D, cfg.n_heads, True, rng),
                "ln2": nnkit.LayerNorm(D),
                "ff1": nnkit.Dense(D, 4 * D, rng),
                "ff2": nnkit.Dense(4 * D, D, rng),
            })
        self.final_norm = nnkit.LayerNorm(D)
        self.head1 = nnkit.Dense(D, cfg.head_hidden, rng)
        self.head_drop = nnkit.Dropout(cfg.dropout, seed=seed + 1)
        # small final init keeps fresh-model logits near uniform
        self.head2 = nnkit.Dense(cfg.head_hidden, cfg.vocab_size, rng, init_scale=0.1)
        self.token_counts: np.ndarray | None = None

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {
            "tok_emb.table": self.tok_emb.params["table"],
            "chan_emb.table": self.chan_emb.params["table"],
            "pos_emb.table": self.pos_emb.params["table"],
            "subj_emb.table": self.subj_emb.params["table"],
        }
        for i, blk in enumerate(self.blocks):
            for part, layer in blk.items():
                for k, v in layer.params.items():
                    out[f"block{i}.{part}.{k}"] = v
        for prefix, layer in (("final_norm", self.final_norm),
                              ("head1", self.head1), ("head2", self.head2)):
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    # -- forward / backward ----------------------------------------------------

    def _embed(self, tokens: np.ndarray, subject_ids: np.ndarray):
        B, L, C = tokens.shape
        cfg = self.cfg
        if L > cfg.receptive_field:
            raise ContextTooLongError(
                f"context {L} exceeds receptive field {cfg.receptive_field}")
        if C != cfg.n_channels:
            raise nnkit.ShapeMismatchError(
                f"window has {C} channels, model expects {cfg.n_channels}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise LabelOutOfRangeError(f"labels must lie in [0, {cfg.vocab_size})")
        if subject_ids.min() < 0 or subject_ids.max() >= cfg.n_subjects:
            raise LabelOutOfRangeError(f"subject ids must lie in [0, {cfg.n_subjects})")
        x = (self.tok_emb.params["table"][tokens]
             + self.chan_emb.params["table"][None, None, :C, :]
             + self.pos_emb.params["table"][None, :L, None, :]
             + self.subj_emb.params["table"][subject_ids][:, None, None, :])
        return x  # (B, L, C, D)

    def _run(self, tokens: np.ndarray, subject_ids: np.ndarray, mode: str):
        """tokens: (B, L, C) -> features (B*C, L, D) plus caches for backward."""
        B, L, C = tokens.shape
        D = self.cfg.embed_dim
        emb = self._embed(tokens, subject_ids)
        x = emb.transpose(0, 2, 1, 3).reshape(B * C, L, D)
        caches = []
        for blk in self.blocks:
            a, c_ln1 = blk["ln1"].forward(x)
            attn_out, c_attn = blk["attn"].forward(a, mode)
            x = x + attn_out
            f, c_ln2 = blk["ln2"].forward(x)
            h1, c_ff1 = blk["ff1"].forward(f)
            ha, c_act = nnkit.leaky_relu(h1, self.cfg.leaky_slope)
            ff_out, c_ff2 = blk["ff2"].forward(ha)
            x = x + ff_out
            caches.append((c_ln1, c_attn, c_ln2, c_ff1, c_act, c_ff2))
        feats, c_final = self.final_norm.forward(x)
        return feats, (tokens, subject_ids, caches, c_final)

    def _head(self, feats: np.ndarray, mode: str):
        h1, c1 = self.head1.forward(feats)
        ha, c_act = nnkit.leaky_relu(h1, self.cfg.leaky_slope)
        hd, c_drop = self.head_drop.forward(ha, mode)
        logits, c2 = self.head2.forward(hd)
        return logits, (c1, c_act, c_drop, c2)

    def _forward_batch(self, tokens: np.ndarray, subject_ids: np.ndarray,
                       mode: str = "infer"):
        B, L, C = tokens.shape
        feats, run_cache = self._run(tokens, subject_ids, mode)
        logits, head_cache = self._head(feats, mode)
        out = logits.reshape(B, C, L, self.cfg.vocab_size).transpose(0, 2, 1, 3)
        return out, (run_cache, head_cache, feats.shape)

    def _backward_batch(self, dlogits: np.ndarray, cache):
        (tokens, subject_ids, caches, c_final), head_cache, feat_shape = cache
        B, L, C, V = dlogits.shape
        D = self.cfg.embed_dim
        grads: dict[str, np.ndarray] = {}
        g = dlogits.transpose(0, 2, 1, 3).reshape(B * C, L, V)
        c1, c_act, c_drop, c2 = head_cache
        g, gh2 = self.head2.backward(g, c2)
        g, _ = self.head_drop.backward(g, c_drop)
        g = nnkit.leaky_relu_backward(g, c_act)
        g, gh1 = self.head1.backward(g, c1)
        g, gfn = self.final_norm.backward(g, c_final)
        for k, v in gh2.items():
            grads[f"head2.{k}"] = v
        for k, v in gh1.items():
            grads[f"head1.{k}"] = v
        for k, v in gfn.items():
            grads[f"final_norm.{k}"] = v
        for i in range(len(self.blocks) - 1, -1, -1):
            blk = self.blocks[i]
            c_ln1, c_attn, c_ln2, c_ff1, c_act, c_ff2 = caches[i]
            gha, gff2 = blk["ff2"].backward(g, c_ff2)
            gh1_ = nnkit.leaky_relu_backward(gha, c_act)
            gf, gff1 = blk["ff1"].backward(gh1_, c_ff1)
            gx, gln2 = blk["ln2"].backward(gf, c_ln2)
            g = g + gx
            ga, gattn = blk["attn"].backward(g, c_attn)
            gx, gln1 = blk["ln1"].backward(ga, c_ln1)
            g = g + gx
            for part, gd in (("ff2", gff2), ("ff1", gff1), ("ln2", gln2),
                             ("attn", gattn), ("ln1", gln1)):
                for k, v in gd.items():
                    grads[f"block{i}.{part}.{k}"] = v
        demb = g.reshape(B, C, L, D).transpose(0, 2, 1, 3)  # (B, L, C, D)
        gt = np.zeros_like(self.tok_emb.params["table"])
        np.add.at(gt, tokens.ravel(), demb.reshape(-1, D))
        grads["tok_emb.table"] = gt
        gc = np.zeros_like(self.chan_emb.params["table"])
        gc[:C] = demb.sum(axis=(0, 1))
        grads["chan_emb.table"] = gc
        gp = np.zeros_like(self.pos_emb.params["table"])
        gp[:L] = demb.sum(axis=(0, 2))
        grads["pos_emb.table"] = gp
        gs = np.zeros_like(self.subj_emb.params["table"])
        np.add.at(gs, subject_ids, demb.sum(axis=(1, 2)))
        grads["subj_emb.table"] = gs
        return grads

    # -- public API --------------------------------------------------------------

    def forward(self, tokens: np.ndarray, subject_id: int = 0,
                mode: str = "infer") -> np.ndarray:
        """Next-token logits for an (L, C) window; output shape (L, C, V)."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        logits, _ = self._forward_batch(tokens[None], np.array([subject_id]), mode)
        return logits[0]

    def extract_features(self, tokens: np.ndarray, subject_id: int = 0) -> np.ndarray:
        """Final decoder-layer activations before the prediction head; shape (L, C, D)."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        feats, _ = self._run(tokens[None], np.array([subject_id]), "infer")
        L, C = tokens.shape
        return feats.reshape(1, C, L, self.cfg.embed_dim)[0].transpose(1, 0, 2)

    def generate(self, prompt: np.ndarray, steps: int,
                 sampler: SamplerConfig | None = None,
                 subject_id: int = 0) -> np.ndarray:
        """Autoregressively extend an (Lp, C) prompt by `steps` sampled rows.

        The visible context is the trailing receptive_field rows; channels are
        sampled in index order from one seeded stream, so generation is
        deterministic given the sampler seed.
        """
        sampler = sampler or SamplerConfig()
        prompt = np.atleast_2d(np.asarray(prompt, dtype=np.int64))
        if prompt.shape[0] < 1:
            raise ValueError("prompt must contain at least one timestep")
        rng = np.random.Generator(np.random.PCG64(sampler.seed))
        out = prompt
        for _ in range(steps):
            ctx = out[-self.cfg.receptive_field:]
            logits = self.forward(ctx, subject_id)[-1]  # (C, V)
            row = np.empty(out.shape[1], dtype=np.int64)
            for c in range(out.shape[1]):
                probs = nnkit.softmax(logits[c] / sampler.temperature)
                row[c] = nucleus_sample(probs, sampler.top_p, rng)
            out = np.vstack([out, row[None, :]])
        return out

    # -- training ----------------------------------------------------------------

    def train(self, dataset: list[TokenSequence], epochs: int = 5,
              max_steps: int | None = None, window_stride: int | None = None,
              val_fraction: float = 0.1, seed: int = 0) -> dict[str, list[float]]:
        """Teacher-forced next-token training over windowed token sequences.

        Windows of receptive_field + 1 labels are cut per sequence; within
        each sequence the trailing `val_fraction` of windows is held out
        (nine-to-one by default). Returns per-epoch train/validation loss and
        top-1 accuracy curves.
        """
        cfg = self.cfg
        L = cfg.receptive_field
        stride = window_stride or (L + 1)
        train_w, val_w = [], []
        for ts in dataset:
            labels = ts.labels.T  # (S, C) time-major
            if labels.shape[1] != cfg.n_channels:
                raise ValueError(
                    f"sequence has {labels.shape[1]} channels, model expects {cfg.n_channels}")
            n = (labels.shape[0] - (L + 1)) // stride + 1
            wins = [(labels[k * stride:k * stride + L + 1], ts.subject_id)
                    for k in range(max(n, 0))]
            n_train = int(round(len(wins) * (1 - val_fraction)))
            train_w.extend(wins[:n_train])
            val_w.extend(wins[n_train:])
        if not train_w:
            raise EmptyDataError("no training windows could be extracted")
        counts = np.zeros(cfg.vocab_size, dtype=np.int64)
        for w, _ in train_w:
            counts += np.bincount(w.ravel(), minlength=cfg.vocab_size)
        self.token_counts = counts
        opt = nnkit.Adam(lr=cfg.lr)
        rng = np.random.Generator(np.random.PCG64(seed))
        params = self.params
        curves = {"train_loss": [], "train_top1": [], "val_loss": [], "val_top1": []}
        steps_done = 0
        for _ in range(epochs):
            order = rng.permutation(len(train_w))
            losses, accs = [], []
            for start in range(0, len(order), cfg.batch_size):
                if max_steps is not None and steps_done >= max_steps:
                    break
                idx = order[start:start + cfg.batch_size]
                windows = np.stack([train_w[i][0] for i in idx])
                subjects = np.array([train_w[i][1] for i in idx])
                inputs, targets = windows[:, :-1, :], windows[:, 1:, :]
                logits, cache = self._forward_batch(inputs, subjects, "train")
                loss, dlogits = nnkit.cross_entropy(logits, targets)
                grads = self._backward_batch(dlogits, cache)
                opt.step(params, grads)
                losses.append(loss)
                accs.append(float((logits.argmax(axis=-1) == targets).mean()))
                steps_done += 1
            if not losses:
                break
            curves["train_loss"].append(float(np.mean(losses)))
            curves["train_top1"].append(float(np.mean(accs)))
            vl, va = self._evaluate(val_w) if val_w else (float("nan"), float("nan"))
            curves["val_loss"].append(vl)
            curves["val_top1"].append(va)
            if max_steps is not None and steps_done >= max_steps:
                break
        return curves

    def _evaluate(self, windows) -> tuple[float, float]:
        losses, accs, weights = [], [], []
        for start in range(0, len(windows), self.cfg.batch_size):
            chunk = windows[start:start + self.cfg.batch_size]
            w = np.stack([c[0] for c in chunk])
            s = np.array([c[1] for c in chunk])
            inputs, targets = w[:, :-1, :], w[:, 1:, :]
            logits, _ = self._forward_batch(inputs, s, "infer")
            loss, _ = nnkit.cross_entropy(logits, targets)
            losses.append(loss)
            accs.append(float((logits.argmax(axis=-1) == targets).mean()))
            weights.append(targets.size)
        weights = np.array(weights, dtype=np.float64)
        return (float(np.average(losses, weights=weights)),
                float(np.average(accs, weights=weights)))

    # -- persistence ---------------------------------------------------------------

    def save(self, directory) -> None:
        manifest = {"model": "gpt-decoder",
                    "layers": [f"block{i}" for i in range(self.cfg.n_layers)]}
        nnkit.save_checkpoint(directory, manifest, self.params)
        sidecar = dict(self.cfg.__dict__)
        sidecar["seed"] = self.seed
        sidecar["token_counts"] = (self.token_counts.tolist()
                                   if self.token_counts is not None else None)
        try:
            with open(Path(directory) / "gpt_config.json", "w", encoding="utf-8") as fh:
                json.dump(sidecar, fh, indent=1)
        except OSError as exc:
            raise IoError(f"cannot write model sidecar: {exc}") from exc

    @classmethod
    def load(cls, directory) -> "GptModel":
        try:
            with open(Path(directory) / "gpt_config.json", "r", encoding="utf-8") as fh:
                sidecar = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read model sidecar: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{directory}: invalid model sidecar") from exc
        counts = sidecar.pop("token_counts", None)
        seed = sidecar.pop("seed", 0)
        model = cls(GptConfig(**sidecar), seed=seed)
        _, tensors = nnkit.load_checkpoint(directory)
        params = model.params
        for name, value in tensors.items():
            if name not in params or params[name].shape != value.shape:
                raise FormatError(f"{directory}: unexpected tensor {name}")
            params[name][...] = value
        if counts is not None:
            model.token_counts = np.asarray(counts, dtype=np.int64)
        return model
