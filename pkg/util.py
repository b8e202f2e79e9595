import json
import random
from collections import OrderedDict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns
import torch

from scaling import eval_law


def read_json(fname):
    fname = Path(fname)
    with fname.open('rt') as handle:
        return json.load(handle, object_hook=OrderedDict)


def write_json(content, fname):
    fname = Path(fname)
    with fname.open('wt') as handle:
        json.dump(content, handle, indent=4, sort_keys=True)
        handle.write("\n")


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def configure_threads(value=None):
    """Cap torch intra-op threads at ``value`` (ELASTRON_THREADS); returns the worker count to use."""
    if value is None:
        return 1
    threads = int(value)
    if threads < 1:
        raise ValueError(f"ELASTRON_THREADS should be at least 1, {threads}")
    torch.set_num_threads(threads)
    return threads


def draw_pareto(frame: pd.DataFrame, path, cloud: pd.DataFrame = None, fit=None):
    plt.figure(figsize=(8, 6))
    if cloud is not None and len(cloud):
        sns.scatterplot(data=cloud, x="cost", y="loss", color="lightgray", label="random")
    sns.lineplot(data=frame, x="cost", y="loss", marker="o", label="routed")
    plt.xlabel("Cost")
    plt.ylabel("Validation loss")
    plt.title("Loss vs cost")
    plt.tight_layout()
    plt.savefig(path)
    plt.close('all')
    if fit is not None and len(frame):
        n = np.geomspace(frame["params"].min(), frame["params"].max(), 64)
        plt.figure(figsize=(8, 6))
        sns.scatterplot(data=frame, x="params", y="loss", label="measured")
        plt.plot(n, eval_law(fit, n), label="fit")
        plt.xscale("log")
        plt.xlabel("Non-embedding parameters")
        plt.ylabel("Validation loss")
        plt.legend()
        plt.tight_layout()
        plt.savefig(Path(path).with_name("scaling_law.png"))
        plt.close('all')


def draw_router_histogram(frame: pd.DataFrame, path):
    plt.figure(figsize=(12, 6))
    largest = frame[frame["candidate"] == frame["candidate"].max()]
    sns.barplot(data=largest, x="slot", y="frequency", hue="domain")
    plt.ylabel("Largest-candidate frequency")
    plt.title("Router allocation vs data domain")
    plt.tight_layout()
    plt.savefig(path)
    plt.close('all')


def draw_trajectory(frame: pd.DataFrame, path):
    plt.figure(figsize=(8, 6))
    sns.lineplot(data=frame, x="step", y="loss", hue="name")
    plt.ylabel("Validation loss")
    plt.tight_layout()
    plt.savefig(path)
    plt.close('all')


def draw_router_losses(frame: pd.DataFrame, path, tau: float = None):
    fig, axes = plt.subplots(3, 1, figsize=(8, 10), sharex=True)
    for ax, column, title in zip(axes, ("l2_loss", "lm_loss", "latency_loss"), ("L2 Loss", "LM Loss", "Latency Loss")):
        ax.plot(frame["step"], frame[column])
        ax.set_title(title)
    if tau is not None and np.isfinite(tau):
        axes[0].axhline(tau, linestyle="--", color="gray")
    axes[-1].set_xlabel("step")
    plt.tight_layout()
    fig.savefig(path)
    plt.close('all')
