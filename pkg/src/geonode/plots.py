"""Figure rendering for the CLI reports (PNG files next to the CSVs)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def training_progress(epochs, loss, terminal, integral, eval_epochs, angle, distance, path,
                      window=10):
    """Loss terms per epoch and held-out final angle / distance."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    ax = axes[0]
    ax.plot(epochs, loss, lw=0.8, color="0.6", label="loss")
    if len(loss) >= window:
        ma = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(epochs[window - 1:], ma, color="C0", label=f"{window}-epoch mean")
    ax.set_xlabel("epoch")
    ax.set_title("total loss")
    ax.legend(fontsize=8)
    ax = axes[1]
    ax.plot(epochs, terminal, label="terminal", color="C1")
    ax.plot(epochs, integral, label="integral", color="C2")
    ax.set_xlabel("epoch")
    ax.set_title("loss terms")
    ax.legend(fontsize=8)
    ax = axes[2]
    ax.plot(eval_epochs, angle, "o-", ms=3, label="final angle [rad]")
    ax.plot(eval_epochs, distance, "s-", ms=3, label="final distance")
    ax.set_xlabel("epoch")
    ax.set_title("held-out set")
    ax.legend(fontsize=8)
    return _save(fig, path)


def trajectory_bundle(t, angle, distance, e_kin, e_pot, failed, path):
    """Per-trajectory curves with their mean, plus mean energy split."""
    ok = ~np.asarray(failed, dtype=bool)
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for ax, data, title in ((axes[0], angle, "angle to goal [rad]"),
                            (axes[1], distance, "distance to goal")):
        ax.plot(t, data[ok].T, lw=0.5, color="0.7")
        if ok.any():
            ax.plot(t, data[ok].mean(axis=0), color="C0", lw=2, label="mean")
            ax.legend(fontsize=8)
        ax.set_xlabel("t [s]")
        ax.set_title(title)
    ax = axes[2]
    if ok.any():
        ek, ep = e_kin[ok].mean(axis=0), e_pot[ok].mean(axis=0)
        e0 = ek[0] + ep[0]
        scale = e0 if e0 != 0 else 1.0
        ax.stackplot(t, ek / scale, ep / scale, labels=["kinetic", "potential"],
                     colors=["C1", "C2"], alpha=0.8)
        ax.legend(fontsize=8)
    ax.set_xlabel("t [s]")
    ax.set_title("mean energy / initial energy")
    return _save(fig, path)


def single_trajectory(t, angle, distance, e_kin, e_pot, wrench, path):
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(t, angle, label="angle [rad]")
    axes[0].plot(t, distance, label="distance")
    axes[0].set_title("error to goal")
    axes[0].legend(fontsize=8)
    axes[1].plot(t, e_kin, label="kinetic")
    axes[1].plot(t, e_pot, label="potential")
    axes[1].plot(t, np.asarray(e_kin) + np.asarray(e_pot), "k--", lw=1, label="total")
    axes[1].set_title("energy")
    axes[1].legend(fontsize=8)
    wrench = np.asarray(wrench)
    for i in range(wrench.shape[1]):
        axes[2].plot(t, wrench[:, i], lw=1, label=f"W{i + 1}")
    axes[2].set_title("control wrench")
    axes[2].legend(fontsize=7, ncol=2)
    for ax in axes:
        ax.set_xlabel("t [s]")
    return _save(fig, path)


__all__ = ["training_progress", "trajectory_bundle", "single_trajectory"]
