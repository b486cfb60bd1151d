"""Evaluation metrics, sensitivity-vs-quality analysis and figure-data CSVs.

Model size counts quantizable weights only; biases, activations and the
decision agents are reported separately as overhead.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .dataquality import RAW, Dataset
from .errors import ContractError, NumericError
from .model import ACT_UNSIGNED, Model, forward
from .policy import Decider, Policy
from .quant import FULL_BITS
from .sensitivity import ModelSurface, hutchinson


def compression_rate(param_counts: Sequence[int], actions: Sequence[float]) -> float:
    """``sum n_l * 32 / sum n_l * a_l``; pruned layers add nothing to the denominator."""
    if len(param_counts) != len(actions):
        raise ContractError("one action per layer required")
    num = float(FULL_BITS * np.sum(param_counts, dtype=np.float64))
    den = float(np.dot(np.asarray(param_counts, np.float64), np.asarray(actions, np.float64)))
    if den <= 0:
        raise NumericError("compression undefined: every layer is pruned")
    return num / den


def model_size_bits(param_counts: Sequence[int], actions: Sequence[float]) -> float:
    return float(np.dot(np.asarray(param_counts, np.float64), np.asarray(actions, np.float64)))


@dataclass
class EvalReport:
    per_level: dict          # level -> top-1 accuracy in percent
    counts: dict             # level -> number of samples
    overall: float
    mean_bits: list          # sample-averaged bits per layer
    weight_bits: float
    size_mb: float
    compression: float
    histogram: dict          # layer -> {bits: batches}
    modal_actions: list
    modal_compression: float
    layers: list = field(default_factory=list)
    overhead_params: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_level"] = {str(k): v for k, v in self.per_level.items()}
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        d["histogram"] = {l: {str(b): c for b, c in h.items()} for l, h in self.histogram.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def evaluate(model: Model, policy: Optional[Policy], dataset: Dataset, bits: Optional[int] = None,
             batch_size: int = 256, act_mode: str = ACT_UNSIGNED) -> EvalReport:
    """Per-level top-1 accuracy.

    With a policy, each batch (drawn from a single quality level) gets the
    argmax decision of every agent; otherwise every layer runs at ``bits``
    (``None`` or 32 means full precision).
    """
    names = [s.name for s in model.quantizable]
    counts_n = model.param_counts
    per_level, counts = {}, {}
    bit_sums = np.zeros(len(names))
    hist = {n: {} for n in names}
    total_correct = 0
    for lvl in sorted(int(l) for l in np.unique(dataset.levels)):
        idx = np.flatnonzero(dataset.levels == lvl)
        correct = 0
        for i in range(0, len(idx), batch_size):
            sel = idx[i:i + batch_size]
            with T.no_grad():
                if policy is not None:
                    decider = Decider(policy, "mode")
                    logits = forward(model, dataset.images[sel], decider, act_mode=act_mode)
                    acts = decider.action_list()
                else:
                    b = FULL_BITS if bits is None else int(bits)
                    acts = [b] * len(names)
                    logits = forward(model, dataset.images[sel], None if b >= FULL_BITS else (lambda *_: b),
                                     act_mode=act_mode)
            correct += int(np.sum(logits.data.argmax(axis=1) == dataset.labels[sel]))
            bit_sums += len(sel) * np.asarray(acts, np.float64)
            for n, a in zip(names, acts):
                hist[n][a] = hist[n].get(a, 0) + 1
        per_level[lvl] = 100.0 * correct / len(idx)
        counts[lvl] = int(len(idx))
        total_correct += correct
    n_total = len(dataset)
    if n_total == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    mean_bits = (bit_sums / n_total).tolist()
    modal = [max(h, key=lambda b: (h[b], -b)) for h in hist.values()]
    wbits = model_size_bits(counts_n, mean_bits)
    return EvalReport(
        per_level=per_level, counts=counts, overall=100.0 * total_correct / n_total,
        mean_bits=mean_bits, weight_bits=wbits, size_mb=wbits / 8 / 2 ** 20,
        compression=compression_rate(counts_n, mean_bits),
        histogram={n: dict(sorted(h.items())) for n, h in hist.items()},
        modal_actions=[int(a) for a in modal], modal_compression=compression_rate(counts_n, modal),
        layers=names, overhead_params=0 if policy is None else int(sum(t.size for t in policy.parameters())),
    )


# ---------------------------------------------------------------------------
# sensitivity versus quality
# ---------------------------------------------------------------------------


def spearman(a, b) -> float:
    """Rank correlation; NaN when either ranking is constant."""
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


def sensitivity_vs_quality(model: Model, dataset: Dataset, levels: Sequence[int] = (1, 2, 3, 4, 5),
                           probes: int = 8, seed: int = 0, batch_size: int = 256) -> dict:
    """Per-layer traces with the same raw samples rendered at each level.

    All levels share the probe seed, so differences come from the data.
    """
    raw = dataset.at_level(RAW) if np.any(dataset.levels == RAW) else dataset
    raw = raw.head(batch_size)
    names = [s.name for s in model.quantizable]
    traces, errs = {}, {}
    for lvl in levels:
        ds = raw.with_level(lvl)
        est = hutchinson(ModelSurface(model, (ds.images, ds.labels)), probes, seed, blockwise=True)
        traces[int(lvl)] = [est[n][0] for n in names]
        errs[int(lvl)] = [est[n][1] for n in names]
    levels = [int(l) for l in levels]
    rho = {a: {b: spearman(traces[a], traces[b]) for b in levels} for a in levels}
    return {"kind": "sensitivity", "layers": names, "levels": levels, "traces": traces,
            "stderr": errs, "spearman": rho, "probes": probes}


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------

SWEEP_HEADER = ("quality_level", "amplitude", "loss")
SENSITIVITY_HEADER = ("quality_level", "layer", "trace", "stderr")
HISTOGRAM_HEADER = ("layer", "bits", "count")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "inf" if np.isinf(v) else repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def sweep_rows(curves: dict) -> list:
    """``curves`` maps quality level -> list of (amplitude, loss)."""
    return [(lvl, a, l) for lvl in sorted(curves) for a, l in sorted(curves[lvl])]


def sensitivity_rows(analysis: dict) -> list:
    return [(lvl, n, t, e) for lvl in analysis["levels"]
            for n, t, e in zip(analysis["layers"], analysis["traces"][lvl], analysis["stderr"][lvl])]


def histogram_rows(histogram: dict, pools: dict) -> list:
    """One row per (layer, pool member), zero counts included."""
    rows = []
    for layer, pool in pools.items():
        h = histogram.get(layer, {})
        for b in pool:
            rows.append((layer, int(b), int(h.get(b, h.get(str(b), 0)))))
    return rows


def emit_figure_data(analysis: dict, path) -> None:
    kind = analysis.get("kind")
    if kind == "sweep":
        text = csv_text(SWEEP_HEADER, sweep_rows(analysis["curves"]))
    elif kind == "sensitivity":
        text = csv_text(SENSITIVITY_HEADER, sensitivity_rows(analysis))
    elif kind == "histogram":
        text = csv_text(HISTOGRAM_HEADER, histogram_rows(analysis["histogram"], analysis["pools"]))
    else:
        raise ContractError(f"unknown analysis kind {kind!r}")
    Path(path).write_text(text)


def perturbation_curves(model: Model, dataset: Dataset, levels: Sequence[int], amplitudes, direction,
                        batch_size: int = 512, actions=None) -> dict:
    """Loss-versus-amplitude curves on the same raw samples rendered per level."""
    from .sensitivity import perturbation_sweep

    raw = dataset.at_level(RAW) if np.any(dataset.levels == RAW) else dataset
    raw = raw.head(batch_size)
    curves = {}
    for lvl in levels:
        ds = raw.with_level(lvl)
        curves[int(lvl)] = perturbation_sweep(model, (ds.images, ds.labels), amplitudes, direction, actions)
    return {"kind": "sweep", "curves": curves}


def argmin_amplitude(curve) -> float:
    amps = [a for a, _ in curve]
    losses = [l for _, l in curve]
    return float(amps[int(np.argmin(losses))])
