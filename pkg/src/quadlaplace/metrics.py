"""Gaussian scoring rules and their aggregation across splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .likelihood import LOG_2PI

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
METRICS = ("nll", "crps")


def _check_var(var):
    var = np.asarray(var, dtype=np.float64)
    if np.any(~(var > 0)) or not np.all(np.isfinite(var)):
        raise ValueError("predictive variance must be finite and > 0")
    return var


def _unpack(pred, var):
    if var is None:
        return pred.mean, pred.variance
    return pred, var


def nll(pred, y, var=None):
    """Negative log density of ``y`` under ``N(mean, var)``.

    Call as ``nll(PredictiveGaussian, y)`` or ``nll(mean, y, var)``; the
    second form is elementwise over arrays.
    """
    mean, v = _unpack(pred, var)
    v = _check_var(v)
    out = 0.5 * (LOG_2PI + np.log(v)) + 0.5 * (np.asarray(y) - mean) ** 2 / v
    return float(out) if np.ndim(out) == 0 else out


def std_normal_cdf(z):
    return 0.5 * special.erfc(-np.asarray(z, dtype=np.float64) / math.sqrt(2.0))


def std_normal_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def crps(pred, y, var=None):
    """Closed-form CRPS of a Gaussian predictive; same call forms as :func:`nll`."""
    mean, v = _unpack(pred, var)
    sigma = np.sqrt(_check_var(v))
    z = (np.asarray(y) - mean) / sigma
    # 2*Phi(z) - 1 == erf(z/sqrt2), which avoids cancellation near z = 0
    out = sigma * (z * special.erf(z / math.sqrt(2.0)) + 2.0 * std_normal_pdf(z) - INV_SQRT_PI)
    return float(out) if np.ndim(out) == 0 else out


def compensated_mean(values) -> float:
    """Mean from an exactly rounded sum, so it does not depend on value order."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("mean of an empty sequence")
    return math.fsum(v.tolist()) / v.size


def evaluate_predictions(means, variances, y) -> dict:
    """Mean NLL and CRPS over test points.

    The reduction is exactly rounded, so the result is bit-identical under
    any reordering of the test set.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty test set")
    out = {}
    for name, fn in (("nll", nll), ("crps", crps)):
        vals = np.atleast_1d(fn(np.asarray(means), y, np.asarray(variances)))
        out[f"{name}_mean"] = compensated_mean(vals)
    return out


def evaluate_split(posterior, spec, lik, X_test, y_test, with_noise: bool = True) -> dict:
    from .laplace import glm_predictive_batch
    y_test = np.asarray(y_test, dtype=np.float64)
    if y_test.size == 0:
        raise ValueError("empty test set")
    means, var = glm_predictive_batch(posterior, spec, X_test, lik, with_noise=with_noise)
    return evaluate_predictions(means, var, y_test)


def to_original_units(metrics: dict, target_std: float) -> dict:
    """Map standardized-space NLL/CRPS means to original target units."""
    return {"nll_mean": metrics["nll_mean"] + math.log(target_std),
            "crps_mean": metrics["crps_mean"] * target_std}


# ---------------------------------------------------------------------------
# aggregation and rendering
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-split metrics for each (dataset, method)."""

    per_split: dict = field(default_factory=dict)   # dataset -> method -> [{split, nll, crps}]
    meta: dict = field(default_factory=dict)

    def add(self, dataset: str, method: str, split_id: str, nll_value: float, crps_value: float):
        rows = self.per_split.setdefault(dataset, {}).setdefault(method, [])
        rows.append({"split": split_id, "nll": float(nll_value), "crps": float(crps_value)})

    def summary(self) -> dict:
        out = {}
        for ds in sorted(self.per_split):
            out[ds] = {}
            for method in sorted(self.per_split[ds]):
                rows = sorted(self.per_split[ds][method], key=lambda r: r["split"])
                out[ds][method] = {"n_splits": len(rows)}
                for m in METRICS:
                    mu, se = mean_and_stderr([r[m] for r in rows])
                    out[ds][method][m] = {"mean": mu, "stderr": se}
        return out

    def to_json(self) -> str:
        doc = {"meta": self.meta, "summary": self.summary(),
               "per_split": {ds: {m: sorted(rows, key=lambda r: r["split"])
                                  for m, rows in sorted(methods.items())}
                             for ds, methods in sorted(self.per_split.items())}}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        doc = json.loads(text)
        return cls(per_split=doc["per_split"], meta=doc.get("meta", {}))

    def to_markdown(self, decimals: int = 4) -> str:
        return render_table(self.summary(), decimals)


def mean_and_stderr(values) -> tuple[float, float]:
    """Arithmetic mean and sample std / sqrt(n); one value gives stderr 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    mu = compensated_mean(v)
    if v.size == 1:
        return mu, 0.0
    return mu, float(np.std(v, ddof=1) / math.sqrt(v.size))


def render_table(summary: dict, decimals: int = 4) -> str:
    """Markdown table: one row per dataset, NLL and CRPS column groups per method.

    Within each metric the lowest mean is bolded; equal means (at the printed
    precision) are all bolded.
    """
    methods = sorted({m for ds in summary.values() for m in ds})
    header = ["Dataset"] + [f"{metric.upper()} {m.upper()}" for metric in METRICS for m in methods]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for ds in sorted(summary):
        cells = [ds]
        for metric in METRICS:
            shown = {}
            for m in methods:
                if m in summary[ds]:
                    s = summary[ds][m][metric]
                    shown[m] = (f"{s['mean']:.{decimals}f}", f"{s['stderr']:.{decimals}f}")
            best = min((float(v[0]) for v in shown.values()), default=None)
            for m in methods:
                if m not in shown:
                    cells.append("n/a")
                    continue
                mu, se = shown[m]
                text = f"{mu} ± {se}"
                if len(shown) > 1 and float(mu) == best:
                    text = f"**{text}**"
                cells.append(text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
