"""Matplotlib figure rendering for report output.

Figures are rendered headlessly to files (SVG by default) next to the CSVs
they are derived from; the CSVs remain the system of record.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_token_histogram(counts: np.ndarray, path, title: str = "Token usage"):
    """Descending token-count curve on a log count axis."""
    fig, ax = plt.subplots(figsize=(5, 3.2), constrained_layout=True)
    ax.plot(np.arange(len(counts)), np.maximum(counts, 1e-9), lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("token rank")
    ax.set_ylabel("count")
    ax.set_title(title)
    return _save(fig, path)


def plot_psd(frequencies: np.ndarray, curves: dict[str, np.ndarray], path,
             title: str = "Power spectral density"):
    """Overlay of channel-averaged PSDs, one labeled line per source."""
    fig, ax = plt.subplots(figsize=(5, 3.2), constrained_layout=True)
    for label, power in curves.items():
        ax.plot(frequencies, power, lw=1.2, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("power (1/Hz)")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_loss_curves(curves: dict[str, list[float]], path, title: str = "Training loss"):
    fig, ax = plt.subplots(figsize=(5, 3.2), constrained_layout=True)
    for label, values in curves.items():
        vals = np.asarray(values, dtype=np.float64)
        if np.all(np.isnan(vals)):
            continue
        ax.plot(np.arange(len(vals)), vals, lw=1.2, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_convergence(log_relative: np.ndarray, rates: np.ndarray, path,
                     title: str = "Convergence"):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2), constrained_layout=True)
    epochs = np.arange(len(log_relative))
    ax1.plot(epochs, log_relative, lw=1.2)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("log-relative loss")
    ax2.plot(epochs, rates, lw=1.2)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("decay rate")
    fig.suptitle(title)
    return _save(fig, path)


def plot_pve(subjects: np.ndarray, values: np.ndarray, path,
             title: str = "Variance explained"):
    fig, ax = plt.subplots(figsize=(5, 3.2), constrained_layout=True)
    ax.bar([str(s) for s in subjects], values, color="tab:blue")
    ax.set_xlabel("subject")
    ax.set_ylabel("PVE (%)")
    ax.set_ylim(0, 102)
    ax.set_title(title)
    return _save(fig, path)
