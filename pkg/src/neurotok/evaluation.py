"""Quantitative evaluation: reconstruction fidelity, spectra, fingerprinting,
convergence analysis, significance testing, and the linear decoding probe.

All operations are pure functions of their inputs and safe to run
concurrently across subjects or channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import welch as scipy_welch
from scipy.special import betainc

from . import nnkit
from .core import TimeSeries
from .errors import (
    DegenerateCurveError,
    DegenerateGroupError,
    GridMismatchError,
    LagTooLargeError,
    ShapeMismatchError,
    SingleClassError,
    WindowTooLongError,
    ZeroVarianceError,
)
from .fixedtok import TokenSequence


# ---------------------------------------------------------------------------
# Reconstruction fidelity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PveReport:
    """Percentage of variance explained, aggregated over the recorded axes."""

    values: np.ndarray
    axes: str

    @property
    def overall(self) -> float:
        return float(np.mean(self.values))


def pve(x: TimeSeries, recon: TimeSeries, axes: str = "time+channel") -> PveReport:
    """100 * (1 - Var(x - recon) / Var(x)).

    axes="time+channel" aggregates the whole recording into one value;
    axes="time" yields one value per channel.
    """
    if x.data.shape != recon.data.shape:
        raise ShapeMismatchError(f"{x.data.shape} vs {recon.data.shape}")
    resid = x.data - recon.data
    if axes == "time+channel":
        total = x.data.var()
        if total == 0:
            raise ZeroVarianceError("signal variance is zero")
        vals = np.array(100.0 * (1.0 - resid.var() / total))
    elif axes == "time":
        total = x.data.var(axis=1)
        if np.any(total == 0):
            raise ZeroVarianceError("a channel has zero variance")
        vals = 100.0 * (1.0 - resid.var(axis=1) / total)
    else:
        raise ValueError(f"unknown axes {axes!r}")
    return PveReport(vals, axes)


def token_histogram(tokens: TokenSequence) -> np.ndarray:
    """Token usage counts sorted in descending order of frequency."""
    counts = np.bincount(tokens.labels.ravel(), minlength=tokens.vocab_size)
    return np.sort(counts)[::-1].copy()


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PsdEstimate:
    """One-sided Welch power spectral density per channel (density scaling,
    so the integral over frequency approximates signal variance)."""

    frequencies: np.ndarray
    power: np.ndarray  # (channels, freqs)
    window_s: float
    overlap: float

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.float64)
        p = np.atleast_2d(np.asarray(self.power, dtype=np.float64))
        if f.ndim != 1 or np.any(np.diff(f) <= 0) or f[0] < 0:
            raise ValueError("frequencies must be nonnegative and ascending")
        if p.shape[1] != f.size:
            raise ValueError("power and frequency grids disagree")
        if np.any(p < 0):
            raise ValueError("power must be nonnegative")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "power", p)

    def peak_frequency(self, channel: int | None = None) -> float:
        """Frequency of the maximum power (mean over channels unless one is given)."""
        p = self.power[channel] if channel is not None else self.power.mean(axis=0)
        return float(self.frequencies[int(np.argmax(p))])


def welch_psd(ts: TimeSeries, window_s: float = 2.0, overlap: float = 0.5) -> PsdEstimate:
    """Averaged Hann-tapered periodograms over half-overlapping segments."""
    nperseg = int(round(window_s * ts.sample_rate))
    if nperseg < 2:
        raise WindowTooLongError(f"window of {window_s} s is too short at this rate")
    if nperseg > ts.n_samples:
        raise WindowTooLongError(
            f"window of {nperseg} samples exceeds recording length {ts.n_samples}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap fraction must lie in [0, 1)")
    freqs, power = scipy_welch(
        ts.data, fs=ts.sample_rate, window="hann", nperseg=nperseg,
        noverlap=int(round(nperseg * overlap)), detrend="constant",
        scaling="density", axis=-1,
    )
    return PsdEstimate(freqs, power, window_s, overlap)


def l2_psd_distance(a: PsdEstimate, b: PsdEstimate) -> np.ndarray:
    """Euclidean distance between spectra along frequency, one value per channel."""
    if not np.array_equal(a.frequencies, b.frequencies):
        raise GridMismatchError("PSD frequency grids differ")
    if a.power.shape != b.power.shape:
        raise GridMismatchError("PSD channel counts differ")
    return np.linalg.norm(a.power - b.power, axis=1)


# ---------------------------------------------------------------------------
# Fingerprinting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FingerprintSet:
    """Per-subject feature vectors (vectorized upper-triangular lag-augmented
    covariances) plus the lag set used to build them."""

    features: np.ndarray  # (subjects, feature_dim)
    lags: tuple[int, ...]
    subject_ids: tuple[int, ...] = ()

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "lags", tuple(self.lags))


DEFAULT_LAGS = tuple(range(-7, 8))


def tde_features(ts: TimeSeries, lags=DEFAULT_LAGS) -> np.ndarray:
    """Strict upper triangle of the covariance of lag-augmented channels.

    Each channel is augmented with one copy per lag (channel-major, lags in
    the given order); the covariance is taken over the time span where all
    lags are valid.
    """
    lags = list(lags)
    if not lags:
        raise ValueError("need at least one lag")
    lo = max(0, -min(lags))
    hi = max(0, max(lags))
    if lo + hi >= ts.n_samples - 1:
        raise LagTooLargeError(f"lag span {lo + hi} too large for {ts.n_samples} samples")
    t0, t1 = lo, ts.n_samples - hi
    rows = [ts.data[c, t0 + l:t1 + l] for c in range(ts.n_channels) for l in lags]
    cov = np.cov(np.stack(rows))
    iu = np.triu_indices(cov.shape[0], k=1)
    return cov[iu]


def build_fingerprints(recordings: list[TimeSeries], lags=DEFAULT_LAGS) -> FingerprintSet:
    feats = np.stack([tde_features(ts, lags) for ts in recordings])
    return FingerprintSet(feats, tuple(lags), tuple(ts.subject_id for ts in recordings))


def _pearson(u: np.ndarray, v: np.ndarray) -> float:
    u = u - u.mean()
    v = v - v.mean()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVarianceError("correlation of a zero-variance vector")
    return float(u @ v / (nu * nv))


@dataclass(frozen=True)
class FingerprintResult:
    top_k_accuracy: float
    consistency: float
    distances: np.ndarray  # (N, N): 1 - corr(real_i, gen_j)


def fingerprint(real: FingerprintSet, gen: FingerprintSet, k: int = 1) -> FingerprintResult:
    """Subject identification between real and generated feature sets.

    distances[i, j] = 1 - corr(real_i, gen_j). Top-k accuracy is the fraction
    of subjects whose matched (diagonal) distance ranks among the k smallest
    in its column; the consistency score is the Pearson correlation between
    the strict upper triangles of the real-real and gen-gen correlation
    matrices.
    """
    fr, fg = real.features, gen.features
    if fr.shape != fg.shape:
        raise ShapeMismatchError(f"feature sets differ: {fr.shape} vs {fg.shape}")
    n = fr.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    cr = fr - fr.mean(axis=1, keepdims=True)
    cg = fg - fg.mean(axis=1, keepdims=True)
    nr = np.linalg.norm(cr, axis=1)
    ng = np.linalg.norm(cg, axis=1)
    if np.any(nr == 0) or np.any(ng == 0):
        raise ZeroVarianceError("a subject has a zero-variance feature vector")
    dist = 1.0 - (cr / nr[:, None]) @ (cg / ng[:, None]).T
    hits = sum((dist[:, j] < dist[j, j]).sum() < k for j in range(n))
    corr_real = np.corrcoef(fr)
    corr_gen = np.corrcoef(fg)
    iu = np.triu_indices(n, k=1)
    consistency = _pearson(corr_real[iu], corr_gen[iu])
    return FingerprintResult(hits / n, consistency, dist)


# ---------------------------------------------------------------------------
# Convergence analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossCurveAnalysis:
    """Raw losses, estimated asymptote, log-relative losses, and decay rates.

    Entries of log_relative and rates are NaN where the loss does not exceed
    the asymptote.
    """

    losses: np.ndarray
    smoothed: np.ndarray
    asymptote: float
    log_relative: np.ndarray
    rates: np.ndarray


def _moving_average(x: np.ndarray, window: int = 5) -> np.ndarray:
    half = window // 2
    return np.array([x[max(0, i - half):i + half + 1].mean() for i in range(len(x))])


def _fit_exponential(curve: np.ndarray, t: np.ndarray | None = None) -> float:
    """Estimate the asymptote of L_t ~ L_inf + A exp(-c t): grid search on the
    decay rate c with closed-form least squares for (L_inf, A), then a bounded
    scalar polish around the best grid point."""
    from scipy.optimize import minimize_scalar

    if t is None:
        t = np.arange(len(curve), dtype=np.float64)

    def solve(c):
        basis = np.column_stack([np.ones_like(t), np.exp(-c * t)])
        coef, *_ = np.linalg.lstsq(basis, curve, rcond=None)
        return float(np.sum((basis @ coef - curve) ** 2)), float(coef[0])

    grid = np.geomspace(1e-3, 10.0, 200)
    sses = [solve(c)[0] for c in grid]
    c0 = grid[int(np.argmin(sses))]
    res = minimize_scalar(lambda c: solve(c)[0], bounds=(c0 / 2, c0 * 2),
                          method="bounded", options={"xatol": 1e-10})
    c_best = float(res.x) if res.fun <= min(sses) else c0
    return solve(c_best)[1]


def loss_convergence(curve) -> LossCurveAnalysis:
    """Log-relative loss and instantaneous decay rate of a per-epoch loss curve.

    The asymptote is estimated from a moving-average-smoothed copy of the
    curve; the log-relative transform and its (central-difference) rates are
    computed on the raw losses.
    """
    losses = np.asarray(curve, dtype=np.float64)
    if losses.ndim != 1 or len(losses) < 3:
        raise DegenerateCurveError("need at least 3 epochs of losses")
    if np.ptp(losses) == 0:
        raise DegenerateCurveError("loss curve is constant")
    smoothed = _moving_average(losses)
    # fit only where the smoothing window was full; shrunken edge windows do
    # not follow the same exponential
    if len(smoothed) >= 9:
        asym = _fit_exponential(smoothed[2:-2], np.arange(2.0, len(smoothed) - 2))
    else:
        asym = _fit_exponential(smoothed)
    if losses[0] <= asym:
        raise DegenerateCurveError("initial loss does not exceed the fitted asymptote")
    valid = losses > asym
    logrel = np.full(len(losses), np.nan)
    logrel[valid] = np.log((losses[valid] - asym) / (losses[0] - asym))
    rates = np.full(len(losses), np.nan)
    n_valid = int(np.argmin(valid)) if not valid.all() else len(losses)
    if n_valid >= 2:
        rates[:n_valid] = -np.gradient(logrel[:n_valid])
    return LossCurveAnalysis(losses, smoothed, asym, logrel, rates)


# ---------------------------------------------------------------------------
# Welch's t-test
# ---------------------------------------------------------------------------

def welch_ttest(a, b) -> tuple[float, float, float]:
    """Welch's unequal-variance t statistic, Welch-Satterthwaite dof, and the
    two-sided p-value from the regularized incomplete beta function."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise DegenerateGroupError("each group needs at least 2 samples")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    if va == 0 and vb == 0:
        raise DegenerateGroupError("both groups have zero variance")
    t = (a.mean() - b.mean()) / np.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return float(t), float(dof), p


# ---------------------------------------------------------------------------
# Zero-shot linear decoding probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeSplit:
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        tr = np.asarray(self.train_idx, dtype=np.int64)
        te = np.asarray(self.test_idx, dtype=np.int64)
        if tr.size == 0 or te.size == 0:
            raise ValueError("both splits must be nonempty")
        if np.intersect1d(tr, te).size:
            raise ValueError("train and test trials must be disjoint")
        object.__setattr__(self, "train_idx", tr)
        object.__setattr__(self, "test_idx", te)


def probe_split(subject_ids, session_ids, mode: str) -> ProbeSplit:
    """within: the last session of every subject is held out;
    new-subject: all sessions of the last subject are held out."""
    subj = np.asarray(subject_ids)
    sess = np.asarray(session_ids)
    if mode == "within":
        test = np.zeros(len(subj), dtype=bool)
        for s in np.unique(subj):
            mask = subj == s
            test |= mask & (sess == sess[mask].max())
    elif mode == "new-subject":
        test = subj == subj.max()
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return ProbeSplit(np.flatnonzero(~test), np.flatnonzero(test))


def zero_shot_probe(features: np.ndarray, labels, split: ProbeSplit,
                    epochs: int = 300, lr: float = 0.05, seed: int = 0) -> float:
    """Train a linear readout on trial features and return test accuracy.

    4-D features (trials, L, C, D) take the zero-shot path: a learned linear
    projection collapses the sequence axis, the result is flattened across
    channel and latent axes, layer-normalized, and classified. 3-D features
    (trials, L, C) take the baseline path: flatten across time and channels,
    layer-normalize, classify. The projection, when present, is trained
    jointly with the classifier.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise SingleClassError("need at least 2 classes")
    if feats.ndim not in (3, 4):
        raise ShapeMismatchError("features must be (N, L, C, D) or (N, L, C)")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_classes = len(classes)
    projected = feats.ndim == 4
    if projected:
        _, L, C, D = feats.shape
        flat_dim = C * D
        proj = np.full(L, 1.0 / L)
    else:
        _, L, C = feats.shape
        flat_dim = L * C
        proj = None
    norm = nnkit.LayerNorm(flat_dim)
    clf = nnkit.Dense(flat_dim, n_classes, rng)
    params = {f"norm.{k}": v for k, v in norm.params.items()}
    params.update({f"clf.{k}": v for k, v in clf.params.items()})
    if projected:
        params["proj"] = proj
    opt = nnkit.Adam(lr=lr)
    ftr, ytr = feats[split.train_idx], y[split.train_idx]

    def head(batch):
        if projected:
            z = np.einsum("nlcd,l->ncd", batch, proj).reshape(len(batch), flat_dim)
        else:
            z = batch.reshape(len(batch), flat_dim)
        h, c_norm = norm.forward(z)
        logits, c_clf = clf.forward(h)
        return z, logits, (c_norm, c_clf)

    for _ in range(epochs):
        _, logits, (c_norm, c_clf) = head(ftr)
        _, dlogits = nnkit.cross_entropy(logits, ytr)
        dh, g_clf = clf.backward(dlogits, c_clf)
        dz, g_norm = norm.backward(dh, c_norm)
        grads = {f"norm.{k}": v for k, v in g_norm.items()}
        grads.update({f"clf.{k}": v for k, v in g_clf.items()})
        if projected:
            grads["proj"] = np.einsum(
                "nlcd,ncd->l", ftr, dz.reshape(len(ftr), C, D))
        opt.step(params, grads)
    _, logits, _ = head(feats[split.test_idx])
    return float((logits.argmax(axis=-1) == y[split.test_idx]).mean())
