from __future__ import annotations
import os

import numpy as np
import pandas as pd
import matplotlib.pyplot as plt

from .core import ScalarField


def plot_hardy_sweep(sweep: pd.DataFrame, out_dir: str):
    """Measured lambda against the exact annulus value, one point per inner radius."""
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.semilogx(sweep["a"], sweep["lambda_hat"], "o-", color="#2e7", label="measured")
    if "exact" in sweep.columns:
        ax.semilogx(sweep["a"], sweep["exact"], "x--", color="#888", label="annulus value")
    ax.axhline(1.0, color="k", lw=0.5)
    ax.set_xlabel("inner radius a")
    ax.set_ylabel("lambda")
    ax.legend()
    plt.tight_layout()
    fp = os.path.join(out_dir, "hardy_sweep.png")
    plt.savefig(fp, dpi=160)
    plt.close(fig)
    return fp


def plot_solution(u: ScalarField, exact: np.ndarray, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    r = u.mesh.nodes[:, 0]
    fig, ax = plt.subplots(1, 2, figsize=(8, 3))
    ax[0].loglog(r, u.values, color="#2e7", label="u")
    ax[0].loglog(r, exact, "--", color="#888", label="closed form")
    ax[0].legend()
    ax[0].set_title("Solution")
    ax[1].semilogx(r, np.abs(u.values - exact) / np.abs(exact), color="#2e7")
    ax[1].set_title("Relative error")
    plt.tight_layout()
    fp = os.path.join(out_dir, "solution_vs_exact.png")
    plt.savefig(fp, dpi=160)
    plt.close(fig)
    return fp


def plot_capacity_decay(table: pd.DataFrame, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.loglog(table["R"], table["capacity"], "o-", color="#2e7", label="computed")
    if "closed_form" in table.columns and table["closed_form"].notna().all():
        ax.loglog(table["R"], table["closed_form"], "x--", color="#888", label="closed form")
    ax.set_xlabel("R")
    ax.set_ylabel("capacity")
    ax.legend()
    plt.tight_layout()
    fp = os.path.join(out_dir, "capacity_decay.png")
    plt.savefig(fp, dpi=160)
    plt.close(fig)
    return fp
