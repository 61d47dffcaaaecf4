"""Optional scatter rendering of predicted vs ground-truth MOS (matplotlib)."""
from .errors import ConfigError


def scatter_plot(reports, path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("rendering needs matplotlib; install the 'plot' extra or use scatter.csv") from None
    fig, ax = plt.subplots(figsize=(5, 5))
    for r in reports:
        if not r.predictions:
            continue
        _, pred, mos = zip(*r.predictions)
        ax.scatter(mos, pred, s=8, alpha=0.6, label=f"{r.name} ({r.main_score:.3f})")
    ax.set_xlabel("ground-truth MOS")
    ax.set_ylabel("predicted MOS")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
