"""Time-series data model, standardization, synthetic signal generation, and file IO.

A recording is a channels x samples float64 matrix plus a sample rate and a
subject id. All types are immutable after construction (arrays are marked
read-only) and every operation returns new objects, so everything in this
module is safe to call concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import (
    ConstantChannelError,
    FormatError,
    InvalidRangeError,
    InvalidWindowError,
    IoError,
)

_MAGIC = b"NTS1"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeSeries:
    """A channels x samples recording in arbitrary (typically standardized) units."""

    data: np.ndarray
    sample_rate: float
    subject_id: int = 0
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"data must be channels x samples, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("data contains non-finite values")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.subject_id < 0:
            raise ValueError("subject_id must be non-negative")
        names = tuple(self.channel_names) or tuple(f"ch{i:02d}" for i in range(data.shape[0]))
        if len(names) != data.shape[0]:
            raise ValueError("channel_names length must equal channel count")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "TimeSeries":
        """Copy of this recording with the payload replaced (same shape not required)."""
        names = self.channel_names if len(self.channel_names) == np.atleast_2d(data).shape[0] else ()
        return TimeSeries(data, self.sample_rate, self.subject_id, names)


@dataclass(frozen=True)
class ScaleParams:
    """Per-channel affine parameters: x' = (x - m) / s. Length-1 arrays broadcast."""

    m: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=np.float64))
        s = np.atleast_1d(np.asarray(self.s, dtype=np.float64))
        if m.shape != s.shape:
            raise ValueError("m and s must have matching shapes")
        if not (s > 0).all():
            raise ConstantChannelError("scale s must be strictly positive on every channel")
        object.__setattr__(self, "m", _readonly(m))
        object.__setattr__(self, "s", _readonly(s))


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for the synthetic oscillatory-signal generator.

    Each oscillator is a (center_hz, amplitude, bandwidth_hz) triple realized
    as white noise shaped by a second-order resonator, giving narrow spectral
    peaks on a broadband noise floor, as in electrophysiological recordings.
    """

    n_subjects: int
    n_channels: int
    n_samples: int
    sample_rate: float
    oscillators: tuple[tuple[float, float, float], ...] = ((10.0, 1.0, 1.0),)
    noise_sigma: float = 0.1
    subject_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_subjects, self.n_channels, self.n_samples) < 1:
            raise ValueError("counts must be at least 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        osc = tuple((float(f), float(a), float(b)) for f, a, b in self.oscillators)
        for f, _, b in osc:
            if not 0 < f < self.sample_rate / 2:
                raise ValueError(f"oscillator frequency {f} must be below Nyquist")
            if b <= 0:
                raise ValueError("oscillator bandwidth must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.subject_jitter < 1:
            raise ValueError("subject_jitter must be in [0, 1)")
        object.__setattr__(self, "oscillators", osc)


def standardize(ts: TimeSeries) -> tuple[TimeSeries, ScaleParams]:
    """Z-score each channel using the population (1/T) standard deviation."""
    m = ts.data.mean(axis=1)
    s = ts.data.std(axis=1)  # population estimator
    if not (s > 0).all():
        bad = [ts.channel_names[i] for i in np.flatnonzero(s == 0)]
        raise ConstantChannelError(f"constant channel(s): {', '.join(bad)}")
    out = (ts.data - m[:, None]) / s[:, None]
    return ts.with_data(out), ScaleParams(m, s)


def unstandardize(ts: TimeSeries, params: ScaleParams) -> TimeSeries:
    """Invert :func:`standardize`: x = x' * s + m."""
    return ts.with_data(ts.data * params.s[:, None] + params.m[:, None])


def clip(ts: TimeSeries, lo: float, hi: float) -> TimeSeries:
    """Saturate every sample into [lo, hi]."""
    if lo >= hi:
        raise InvalidRangeError(f"clip range requires lo < hi, got [{lo}, {hi}]")
    return ts.with_data(np.clip(ts.data, lo, hi))


def window(ts: TimeSeries, length: int, stride: int) -> list[TimeSeries]:
    """Consecutive segments of `length` samples starting every `stride` samples."""
    if length < 1 or length > ts.n_samples:
        raise InvalidWindowError(
            f"window length {length} invalid for {ts.n_samples} samples"
        )
    if stride < 1:
        raise InvalidWindowError(f"stride must be at least 1, got {stride}")
    count = (ts.n_samples - length) // stride + 1
    return [
        TimeSeries(ts.data[:, k * stride : k * stride + length],
                   ts.sample_rate, ts.subject_id, ts.channel_names)
        for k in range(count)
    ]


def _resonator_noise(rng: np.random.Generator, n: int, freq: float, bw: float,
                     fs: float) -> np.ndarray:
    """Unit-variance narrow-band noise from a two-pole resonator at `freq`."""
    freq = min(freq, 0.499 * fs)  # jitter may push the center toward Nyquist
    r = np.exp(-np.pi * bw / fs)
    w0 = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(w0), r * r]
    y = lfilter([1.0], a, rng.standard_normal(n))
    sd = y.std()
    return y / sd if sd > 0 else y


def synth_generate(spec: SyntheticSpec) -> list[TimeSeries]:
    """Generate one standardized recording per subject, deterministically.

    The master seed expands to per-subject and per-(subject, channel)
    substreams through counter-based seed splitting, so adding subjects or
    channels never perturbs the streams of earlier ones.
    """
    out = []
    for subj in range(spec.n_subjects):
        jit_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(spec.seed, spawn_key=(subj,)))
        )
        params = []
        for f, a, b in spec.oscillators:
            fj = f * (1 + spec.subject_jitter * jit_rng.uniform(-1, 1))
            aj = a * (1 + spec.subject_jitter * jit_rng.uniform(-1, 1))
            params.append((fj, aj, b))
        chans = np.empty((spec.n_channels, spec.n_samples))
        for ch in range(spec.n_channels):
            rng = np.random.Generator(
                np.random.Philox(np.random.SeedSequence(spec.seed, spawn_key=(subj, ch)))
            )
            x = np.zeros(spec.n_samples)
            for fj, aj, b in params:
                x += aj * _resonator_noise(rng, spec.n_samples, fj, b, spec.sample_rate)
            if spec.noise_sigma > 0:
                x += spec.noise_sigma * rng.standard_normal(spec.n_samples)
            chans[ch] = x
        ts = TimeSeries(chans, spec.sample_rate, subj)
        out.append(standardize(ts)[0])
    return out


# ---------------------------------------------------------------------------
# File IO
#
# Binary layout "NTS1": magic, little-endian u32 channels, u64 samples,
# f64 sample_rate, u32 subject_id, u32 name-block length, UTF-8
# newline-separated channel names, then a channel-major f32 payload.
# ---------------------------------------------------------------------------

def save_timeseries(path, ts: TimeSeries) -> None:
    """Write a recording in the NTS1 binary format (payload stored as f32)."""
    names = "\n".join(ts.channel_names).encode("utf-8")
    header = _MAGIC + struct.pack(
        "<IQdII", ts.n_channels, ts.n_samples, ts.sample_rate, ts.subject_id, len(names)
    )
    payload = ts.data.astype("<f4").tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(names)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_timeseries(path) -> TimeSeries:
    """Read a recording written by :func:`save_timeseries`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic, not an NTS1 file")
    head_len = 4 + struct.calcsize("<IQdII")
    if len(blob) < head_len:
        raise FormatError(f"{path}: truncated header")
    channels, samples, rate, subject, name_len = struct.unpack(
        "<IQdII", blob[4:head_len]
    )
    body = blob[head_len:]
    expect = name_len + 4 * channels * samples
    if len(body) != expect:
        raise FormatError(f"{path}: expected {expect} payload bytes, found {len(body)}")
    names = body[:name_len].decode("utf-8").split("\n") if name_len else []
    data = np.frombuffer(body[name_len:], dtype="<f4").reshape(channels, samples)
    if names and len(names) != channels:
        raise FormatError(f"{path}: {len(names)} channel names for {channels} channels")
    return TimeSeries(data, rate, subject, tuple(names))


def save_csv(path, ts: TimeSeries) -> None:
    """Write samples as CSV, one column per channel, header row of channel names."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(ts.channel_names) + "\n")
            for row in ts.data.T:
                fh.write(",".join(format(v, ".12g") for v in row) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_csv(path, sample_rate: float, subject_id: int = 0) -> TimeSeries:
    """Read a CSV written by :func:`save_csv` (sample rate is not stored in CSV)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise FormatError(f"{path}: empty CSV")
    names = tuple(lines[0].split(","))
    try:
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric sample value") from exc
    if data.ndim != 2 or data.shape[1] != len(names):
        raise FormatError(f"{path}: inconsistent column count")
    return TimeSeries(data.T, sample_rate, subject_id, names)
