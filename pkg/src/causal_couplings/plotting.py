"""Figures written next to the experiment tables (Agg backend, PNG files)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)
    return path


def plot_maximality(rows, path):
    """Learned mismatch probability against training noise scale, with reference lines."""
    rows = sorted(rows, key=lambda r: r["rho"])
    ok = [r for r in rows if r.get("learned") is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    # rho = 0 cannot sit on a log axis; show it at a small positive offset
    positive = [r["rho"] for r in rows if r["rho"] > 0]
    floor = min(positive) / 10 if positive else 1e-3
    x = [max(r["rho"], floor) for r in ok]
    ax.plot(x, [r["learned"] for r in ok], "o-", label="gadget 2 (trained)")
    ax.axhline(rows[0]["maximal"], color="k", ls="--", label="maximal coupling")
    ax.axhline(rows[0]["gumbel_max"], color="r", ls=":", label="Gumbel-max")
    ax.set_xscale("log")
    ax.set_xlabel("training noise scale (multiples of logit spread; leftmost point is 0)")
    ax.set_ylabel("P(x != y)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_variance_table(summary, path):
    """Grouped bars: mechanism variance per query cell with standard-error whiskers."""
    cells = list(dict.fromkeys(s["cell"] for s in summary))
    mechs = list(dict.fromkeys(s["mechanism"] for s in summary))
    lookup = {(s["cell"], s["mechanism"]): s for s in summary}
    width = 0.8 / max(len(mechs), 1)
    fig, axes = plt.subplots(1, len(cells), figsize=(3.2 * len(cells), 3.5), squeeze=False)
    for ax, cell in zip(axes[0], cells):
        for i, m in enumerate(mechs):
            s = lookup.get((cell, m))
            if s is None or s.get("variance") is None:
                continue
            ax.bar(i * width, s["variance"], width, yerr=s.get("std_error", 0.0), label=m)
        ax.set_title(cell, fontsize="small")
        ax.set_xticks([])
    axes[0][0].set_ylabel("variance of h(x) - h(y)")
    axes[0][-1].legend(frameon=False, fontsize="x-small", loc="upper right")
    return _save(fig, path)


def plot_mdp_variance(summary, path):
    """Variance per mechanism for each (setting, variant) panel."""
    panels = list(dict.fromkeys((s["setting"], s["variant"]) for s in summary))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.5), squeeze=False)
    for ax, (setting, variant) in zip(axes[0], panels):
        rows = [s for s in summary if s["setting"] == setting and s["variant"] == variant]
        ax.bar(np.arange(len(rows)), [r["variance"] for r in rows],
               yerr=[r["std_error"] for r in rows], color="0.6")
        ax.set_xticks(np.arange(len(rows)))
        ax.set_xticklabels([r["mechanism"] for r in rows], rotation=60, fontsize="x-small")
        ax.set_title(f"{setting} / {variant}", fontsize="small")
    axes[0][0].set_ylabel("treatment-effect variance")
    return _save(fig, path)


def plot_coupling(joint, path, title=None):
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.imshow(np.asarray(joint), cmap="Greys", origin="upper")
    ax.set_xlabel("y")
    ax.set_ylabel("x")
    if title:
        ax.set_title(title, fontsize="small")
    return _save(fig, path)


def plot_loss_history(history, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(history) + 1), history, lw=0.6)
    ax.set_xlabel("iteration")
    ax.set_ylabel("surrogate loss")
    return _save(fig, path)
