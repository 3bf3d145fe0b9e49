"""Static figures written next to the CSV reports (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_accuracy(rows, path):
    """Test NRMSE per configuration with the constant-estimator level as a dashed line."""
    cnn_rows = [r for r in rows if r.config != "reference" and np.isfinite(r.nrmse)]
    ref = [r.nrmse for r in rows if r.config == "reference"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(cnn_rows)), [r.nrmse for r in cnn_rows], color="tab:blue")
    ax.set_xticks(range(len(cnn_rows)), [r.config for r in cnn_rows], rotation=20, ha="right")
    if ref:
        ax.axhline(ref[0], color="k", ls="--", label="reference")
        ax.legend()
    ax.set_yscale("log")
    ax.set_ylabel("test NRMSE [wavelengths]")
    return _save(fig, path)


def plot_spacing(rows, path):
    """CNN and correlation-baseline NRMSE against training-grid spacing."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, style in (("cnn", "o-"), ("baseline", "s--")):
        pts = sorted((r.spacing_lambda, r.nrmse) for r in rows if r.config == name)
        if pts:
            ax.plot(*zip(*pts), style, label=name)
    spacings = sorted({r.spacing_lambda for r in rows})
    if spacings:
        ax.plot(spacings, np.asarray(spacings) / np.sqrt(6), ":", color="gray", label="nearest-grid floor")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("grid spacing [wavelengths]")
    ax.set_ylabel("test NRMSE [wavelengths]")
    ax.legend()
    return _save(fig, path)


def plot_estimates(labels, estimates, path, max_points: int = 400):
    """True positions joined to their estimates by short segments."""
    labels = np.asarray(labels)[:max_points]
    estimates = np.asarray(estimates)[:max_points]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for x, t in zip(labels, estimates):
        ax.plot([x[0], t[0]], [x[1], t[1]], color="tab:red", lw=0.5)
    ax.scatter(labels[:, 0], labels[:, 1], s=4, color="k", label="true")
    ax.scatter(estimates[:, 0], estimates[:, 1], s=4, color="tab:blue", label="estimate")
    ax.set_aspect("equal")
    ax.set_xlabel("x [wavelengths]")
    ax.set_ylabel("y [wavelengths]")
    ax.legend(loc="upper right", fontsize="small")
    return _save(fig, path)


def plot_loss(losses, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.semilogy(np.arange(len(losses)), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    return _save(fig, path)
