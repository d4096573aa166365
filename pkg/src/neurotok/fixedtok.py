"""Non-learnable sample-level codecs: logarithmic companding and quantile binning.

Both codecs share a pipeline: clip to empirical quantile bounds, apply an
affine scale, optionally compand, then assign each sample to a bin by binary
search. Detokenization maps labels back to bin centers and inverts the chain.
Fitting pools all channels of all training recordings, so one set of bin
edges serves every channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import ScaleParams, TimeSeries
from .errors import (
    DegenerateQuantilesError,
    DomainError,
    EmptyDataError,
    FormatError,
    InvalidVocabError,
    IoError,
    VocabMismatchError,
)

_TOKEN_MAGIC = b"NTK1"
_DOMAIN_TOL = 1e-12


@dataclass(frozen=True)
class TokenSequence:
    """Channels x samples integer labels drawn from a vocabulary of size V.

    sample_rate and subject_id travel with the sequence in memory for
    convenience; the NTK1 file format stores only V, shape, and labels.
    """

    labels: np.ndarray
    vocab_size: int
    provenance: str = ""
    sample_rate: float = 1.0
    subject_id: int = 0

    def __post_init__(self):
        labels = np.atleast_2d(np.asarray(self.labels))
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be at least 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.vocab_size):
            raise ValueError(f"labels must lie in [0, {self.vocab_size})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_channels(self) -> int:
        return self.labels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.labels.shape[1]


def mu_law(x, mu: float):
    """Compand [-1, 1] values logarithmically: sgn(x) ln(1 + mu|x|) / ln(1 + mu)."""
    if mu <= 0:
        raise DomainError(f"mu must be positive, got {mu}")
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1 + _DOMAIN_TOL):
        raise DomainError("mu_law input must lie in [-1, 1]")
    x = np.clip(x, -1.0, 1.0)
    out = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    return out if out.ndim else float(out)


def mu_law_inverse(y, mu: float):
    """Invert :func:`mu_law`: sgn(y) ((1 + mu)^|y| - 1) / mu."""
    if mu <= 0:
        raise DomainError(f"mu must be positive, got {mu}")
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.abs(y) > 1 + _DOMAIN_TOL):
        raise DomainError("mu_law_inverse input must lie in [-1, 1]")
    y = np.clip(y, -1.0, 1.0)
    out = np.sign(y) * np.expm1(np.abs(y) * np.log1p(mu)) / mu
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FixedTokenizer:
    """A fitted codec: clip bounds, affine scale, and V-bin boundaries.

    kind is "mu" (max-abs scaling + companding, uniform bins in companded
    space) or "sq" (z-scoring + empirical-quantile bins). bin_edges holds the
    V-1 interior boundaries in transformed space; parameters are frozen after
    fitting.
    """

    kind: str
    vocab_size: int
    scale: ScaleParams
    bin_edges: np.ndarray
    clip_lo: float
    clip_hi: float
    mu: float | None = None

    def __post_init__(self):
        if self.kind not in ("mu", "sq"):
            raise ValueError(f"unknown tokenizer kind {self.kind!r}")
        if self.vocab_size < 2:
            raise InvalidVocabError(f"vocabulary must have at least 2 bins, got {self.vocab_size}")
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        if edges.shape != (self.vocab_size - 1,):
            raise ValueError("bin_edges must hold V-1 interior boundaries")
        if not np.all(np.diff(edges) > 0):
            raise DegenerateQuantilesError("bin edges must be strictly increasing")
        if self.clip_lo >= self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")
        edges.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)

    @property
    def provenance(self) -> str:
        return f"{self.kind}{self.vocab_size}"

    def _transform(self, x: np.ndarray) -> np.ndarray:
        x = np.clip(x, self.clip_lo, self.clip_hi)
        x = (x - self.scale.m[0]) / self.scale.s[0]
        if self.kind == "mu":
            x = mu_law(x, self.mu)
        return x

    def _full_edges(self) -> np.ndarray:
        if self.kind == "mu":
            lo, hi = -1.0, 1.0
        else:
            lo = (self.clip_lo - self.scale.m[0]) / self.scale.s[0]
            hi = (self.clip_hi - self.scale.m[0]) / self.scale.s[0]
        return np.concatenate(([lo], self.bin_edges, [hi]))

    def tokenize(self, ts: TimeSeries) -> TokenSequence:
        """Map every sample to its bin index (ties on an edge go to the higher bin)."""
        v = self._transform(ts.data)
        labels = np.searchsorted(self.bin_edges, v, side="right")
        return TokenSequence(labels, self.vocab_size, self.provenance,
                             ts.sample_rate, ts.subject_id)

    def detokenize(self, tokens: TokenSequence) -> TimeSeries:
        """Map labels to bin centers in transformed space and invert the chain."""
        if tokens.vocab_size != self.vocab_size:
            raise VocabMismatchError(
                f"token vocabulary {tokens.vocab_size} != tokenizer vocabulary {self.vocab_size}"
            )
        edges = self._full_edges()
        mids = 0.5 * (edges[:-1] + edges[1:])
        v = mids[tokens.labels]
        if self.kind == "mu":
            v = mu_law_inverse(v, self.mu)
        x = v * self.scale.s[0] + self.scale.m[0]
        return TimeSeries(x, tokens.sample_rate, tokens.subject_id)

    def to_json(self, path) -> None:
        doc = {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "mu": self.mu,
            "clip_lo": self.clip_lo,
            "clip_hi": self.clip_hi,
            "scale_m": self.scale.m.tolist(),
            "scale_s": self.scale.s.tolist(),
            "bin_edges": self.bin_edges.tolist(),
        }
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=1)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "FixedTokenizer":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid tokenizer JSON") from exc
        try:
            return cls(
                kind=doc["kind"],
                vocab_size=doc["vocab_size"],
                scale=ScaleParams(np.array(doc["scale_m"]), np.array(doc["scale_s"])),
                bin_edges=np.array(doc["bin_edges"]),
                clip_lo=doc["clip_lo"],
                clip_hi=doc["clip_hi"],
                mu=doc["mu"],
            )
        except KeyError as exc:
            raise FormatError(f"{path}: missing tokenizer field {exc}") from exc


def _pool(data: list[TimeSeries]) -> np.ndarray:
    if not data:
        raise EmptyDataError("no training recordings given")
    return np.concatenate([ts.data.ravel() for ts in data])


def _clip_bounds(pooled: np.ndarray, clip_quantiles: tuple[float, float]) -> tuple[float, float]:
    qlo, qhi = clip_quantiles
    if not 0 <= qlo < qhi <= 1:
        raise ValueError(f"clip quantiles must satisfy 0 <= lo < hi <= 1, got {clip_quantiles}")
    lo, hi = np.quantile(pooled, [qlo, qhi])
    if lo >= hi:
        raise DegenerateQuantilesError("clip bounds collapse; data is (nearly) constant")
    return float(lo), float(hi)


def fit_mu_tokenizer(
    data: list[TimeSeries],
    vocab_size: int,
    mu: float | None = None,
    clip_quantiles: tuple[float, float] = (0.0005, 0.9995),
) -> FixedTokenizer:
    """Fit the companding codec: max-abs scaling, uniform bins in companded space.

    mu defaults to V-1, the classic choice tying compression strength to
    quantization depth.
    """
    if vocab_size < 2:
        raise InvalidVocabError(f"vocabulary must have at least 2 bins, got {vocab_size}")
    pooled = _pool(data)
    lo, hi = _clip_bounds(pooled, clip_quantiles)
    s = float(np.abs(np.clip(pooled, lo, hi)).max())
    edges = np.linspace(-1.0, 1.0, vocab_size + 1)[1:-1]
    return FixedTokenizer(
        kind="mu",
        vocab_size=vocab_size,
        scale=ScaleParams(np.array([0.0]), np.array([s])),
        bin_edges=edges,
        clip_lo=lo,
        clip_hi=hi,
        mu=float(mu) if mu is not None else float(vocab_size - 1),
    )


def fit_sq_tokenizer(
    data: list[TimeSeries],
    vocab_size: int,
    clip_quantiles: tuple[float, float] = (0.0005, 0.9995),
) -> FixedTokenizer:
    """Fit the quantile codec: z-scoring, then k/V empirical-quantile bin edges."""
    if vocab_size < 2:
        raise InvalidVocabError(f"vocabulary must have at least 2 bins, got {vocab_size}")
    pooled = _pool(data)
    lo, hi = _clip_bounds(pooled, clip_quantiles)
    clipped = np.clip(pooled, lo, hi)
    m = float(clipped.mean())
    s = float(clipped.std())  # population estimator
    if s == 0:
        raise DegenerateQuantilesError("pooled data has zero variance after clipping")
    z = (clipped - m) / s
    edges = np.quantile(z, np.arange(1, vocab_size) / vocab_size)
    if not np.all(np.diff(edges) > 0):
        raise DegenerateQuantilesError(
            "quantile edges are not strictly increasing; too few distinct values"
        )
    return FixedTokenizer(
        kind="sq",
        vocab_size=vocab_size,
        scale=ScaleParams(np.array([m]), np.array([s])),
        bin_edges=edges,
        clip_lo=lo,
        clip_hi=hi,
    )


def save_tokens(path, tokens: TokenSequence) -> None:
    """Write labels in the NTK1 binary format (u32 little-endian, channel-major)."""
    header = _TOKEN_MAGIC + struct.pack(
        "<IIQ", tokens.vocab_size, tokens.n_channels, tokens.n_samples
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(tokens.labels.astype("<u4").tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_tokens(path, sample_rate: float = 1.0, subject_id: int = 0,
                provenance: str = "") -> TokenSequence:
    """Read labels written by :func:`save_tokens`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != _TOKEN_MAGIC:
        raise FormatError(f"{path}: bad magic, not an NTK1 file")
    head_len = 4 + struct.calcsize("<IIQ")
    if len(blob) < head_len:
        raise FormatError(f"{path}: truncated header")
    vocab, channels, samples = struct.unpack("<IIQ", blob[4:head_len])
    body = blob[head_len:]
    if len(body) != 4 * channels * samples:
        raise FormatError(f"{path}: truncated label payload")
    labels = np.frombuffer(body, dtype="<u4").reshape(channels, samples).astype(np.int64)
    if labels.size and labels.max() >= vocab:
        raise FormatError(f"{path}: label exceeds vocabulary size {vocab}")
    return TokenSequence(labels, vocab, provenance, sample_rate, subject_id)
