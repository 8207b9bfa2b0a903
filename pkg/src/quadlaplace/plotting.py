"""Report figures (PNG via the non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402
from .metrics import METRICS, MetricReport  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 120,
}
_COLORS = {"lla": "#4C72B0", "qla": "#DD8452"}
# no timestamp or version string, so identical inputs give identical files
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    import io
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return path


def plot_per_split(report: MetricReport, dataset: str, path: Path) -> Path:
    """Grouped bars of NLL and CRPS per gap split, one colour per method."""
    methods = sorted(report.per_split[dataset])
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(METRICS), figsize=(4.2 * len(METRICS), 3.2))
        width = 0.8 / len(methods)
        for ax, metric in zip(np.atleast_1d(axes), METRICS):
            splits = None
            for i, m in enumerate(methods):
                rows = sorted(report.per_split[dataset][m], key=lambda r: r["split"])
                splits = [r["split"].removeprefix("gap") for r in rows]
                x = np.arange(len(rows)) + (i - (len(methods) - 1) / 2) * width
                ax.bar(x, [r[metric] for r in rows], width, label=m.upper(),
                       color=_COLORS.get(m, None))
            ax.set_xticks(np.arange(len(splits)), splits)
            ax.set_xlabel("held-out dimension")
            ax.set_ylabel(metric.upper())
        handles, labels = np.atleast_1d(axes)[0].get_legend_handles_labels()
        fig.legend(handles, labels, loc="upper right", ncol=len(methods), frameon=False)
        fig.suptitle(dataset, x=0.02, ha="left")
        return _save(fig, path)


def plot_difference(report: MetricReport, dataset: str, path: Path) -> Path | None:
    """QLA minus LLA NLL per split (negative favours QLA)."""
    methods = report.per_split[dataset]
    if not {"lla", "qla"} <= set(methods):
        return None
    lla = {r["split"]: r["nll"] for r in methods["lla"]}
    qla = {r["split"]: r["nll"] for r in methods["qla"]}
    splits = sorted(set(lla) & set(qla))
    diff = [qla[s] - lla[s] for s in splits]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.axhline(0.0, color="0.3", lw=0.8)
        ax.bar(range(len(splits)), diff, color=["#55A868" if d < 0 else "#C44E52" for d in diff])
        ax.set_xticks(range(len(splits)), [s.removeprefix("gap") for s in splits])
        ax.set_xlabel("held-out dimension")
        ax.set_ylabel("NLL(QLA) - NLL(LLA)")
        ax.set_title(dataset)
        return _save(fig, path)


def plot_report(report: MetricReport, outdir) -> list[Path]:
    outdir = Path(outdir) / "figures"
    paths = []
    for ds in sorted(report.per_split):
        paths.append(plot_per_split(report, ds, outdir / f"{ds}_metrics.png"))
        p = plot_difference(report, ds, outdir / f"{ds}_nll_difference.png")
        if p is not None:
            paths.append(p)
    return paths
