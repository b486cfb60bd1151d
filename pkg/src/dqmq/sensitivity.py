"""Layer sensitivity from stochastic Hessian traces, and action-pool assignment.

Hessian-vector products are central finite differences of first-order
gradients, so the tensor core never needs second-order autodiff.  Model
gradients for this purpose are evaluated in float64 on private copies of the
parameters; the model itself is never written.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .model import Model, forward
from .rng import Rng

logger = logging.getLogger(__name__)

POOL_LOW = (0, 1, 2)
POOL_MID = (2, 4, 8)
POOL_HIGH = (8, 16, 32)
POOLS = (POOL_LOW, POOL_MID, POOL_HIGH)
POOL_NAMES = {POOL_LOW: "low", POOL_MID: "mid", POOL_HIGH: "high"}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DQMQ_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# loss surfaces over a flat parameter vector
# ---------------------------------------------------------------------------


class Surface:
    """A loss over flat parameters ``theta`` split into named layer blocks."""

    theta: np.ndarray
    slices: dict

    def grad(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def loss(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    @property
    def layer_names(self) -> list:
        return list(self.slices)


class QuadraticSurface(Surface):
    """``0.5 * theta^T diag(d) theta``, one block per coordinate group."""

    def __init__(self, diag, theta=None, blocks=None):
        self.diag = np.asarray(diag, dtype=np.float64)
        self.theta = np.zeros_like(self.diag) if theta is None else np.asarray(theta, np.float64)
        self.slices = blocks or {"all": slice(0, len(self.diag))}

    def grad(self, theta):
        return self.diag * theta

    def loss(self, theta):
        return float(0.5 * theta @ (self.diag * theta))


class LinearSurface(Surface):
    def __init__(self, c, theta=None):
        self.c = np.asarray(c, dtype=np.float64)
        self.theta = np.zeros_like(self.c) if theta is None else np.asarray(theta, np.float64)
        self.slices = {"all": slice(0, len(self.c))}

    def grad(self, theta):
        return self.c.copy()

    def loss(self, theta):
        return float(self.c @ theta)


class ModelSurface(Surface):
    """Cross-entropy of the unquantized model on a fixed batch, over layer weights.

    ReLU patterns are frozen at ``theta``, so gradients near ``theta`` are
    those of the smooth piece containing it and finite differences recover
    the almost-everywhere Hessian.
    """

    def __init__(self, model: Model, batch, layers: Optional[Sequence[str]] = None, dtype=np.float64):
        self.model = model
        x, y = batch
        self.x = np.asarray(x, dtype=dtype)
        self.y = np.asarray(y)
        self.dtype = dtype
        names = list(layers) if layers is not None else [s.name for s in model.quantizable]
        self.shapes = {n: model.weights[n].shape for n in names}
        self.slices, start = {}, 0
        for n in names:
            size = int(np.prod(self.shapes[n]))
            self.slices[n] = slice(start, start + size)
            start += size
        self.theta = np.concatenate([model.weights[n].data.reshape(-1).astype(np.float64) for n in names])
        self._biases = {k: T.Tensor(v.data, dtype=dtype) for k, v in model.biases.items()}
        self._frozen = {k: T.Tensor(v.data, dtype=dtype) for k, v in model.weights.items()
                        if k not in self.slices}
        # activation patterns at theta, replayed by every later evaluation
        self._masks = []
        with T.no_grad(), T.frozen_relu(self._masks, record=True):
            self._fn([T.Tensor(a, dtype=dtype) for a in self._arrays(self.theta)])

    def _arrays(self, theta):
        return [theta[sl].reshape(self.shapes[n]).astype(self.dtype) for n, sl in self.slices.items()]

    def _fn(self, leaves):
        weights = dict(self._frozen)
        weights.update(zip(self.slices, leaves))
        logits = forward(self.model, self.x, weights=weights, biases=self._biases)
        return T.cross_entropy(logits, self.y)

    def grad(self, theta):
        with T.frozen_relu(self._masks):
            _, grads = T.grad_at(self._fn, self._arrays(theta))
        return np.concatenate([g.reshape(-1) for g in grads]).astype(np.float64)

    def loss(self, theta):
        with T.no_grad(), T.frozen_relu(self._masks):
            leaves = [T.Tensor(a, dtype=self.dtype) for a in self._arrays(theta)]
            return self._fn(leaves).item()


def hvp(surface: Surface, v, eps: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian-vector product at ``surface.theta``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != surface.theta.shape:
        raise ContractError(f"probe has {v.size} entries, parameters have {surface.theta.size}")
    if eps <= 0:
        raise ContractError("eps must be positive")
    h = eps * (1.0 + float(np.max(np.abs(surface.theta), initial=0.0)))
    gp = surface.grad(surface.theta + h * v)
    gm = surface.grad(surface.theta - h * v)
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
        raise NumericError("non-finite gradient during Hessian-vector product")
    return (gp - gm) / (2.0 * h)


def hutchinson(surface: Surface, probes: int, seed: int, layers: Optional[Sequence[str]] = None,
               eps: float = 1e-4, blockwise: bool = False) -> dict:
    """Per-layer Hutchinson trace estimates ``{layer: (estimate, stderr)}``.

    By default every probe perturbs all selected blocks at once; the
    cross-block terms of ``v_l . (H v)_l`` have zero mean, so each block's
    estimate stays unbiased, but they add variance.  ``blockwise=True`` probes
    one block at a time instead (one Hessian-vector product per block and
    probe), which removes those terms.  Probe ``i`` draws from stream ``i`` of
    ``seed`` and results are reduced in a fixed order, so the outcome does not
    depend on the worker count.
    """
    if probes < 1:
        raise ContractError("probes must be >= 1")
    names = list(layers) if layers is not None else surface.layer_names
    groups = [[n] for n in names] if blockwise else [names]

    def one(job):
        g, i = job
        mask = np.zeros_like(surface.theta)
        for n in groups[g]:
            mask[surface.slices[n]] = 1.0
        v = Rng(seed, stream=i).rademacher(surface.theta.shape) * mask
        hv = hvp(surface, v, eps)
        return [float(v[surface.slices[n]] @ hv[surface.slices[n]]) for n in groups[g]]

    jobs = [(g, i) for g in range(len(groups)) for i in range(probes)]
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    samples = {n: [] for n in names}
    for (g, _), vals in zip(jobs, results):
        for n, val in zip(groups[g], vals):
            samples[n].append(val)
    out = {}
    for n in names:
        arr = np.asarray(samples[n])
        err = arr.std(ddof=1) / np.sqrt(probes) if probes > 1 else np.inf
        out[n] = (float(arr.mean()), float(err))
    return out


def hutchinson_trace(model, batch, layer: Optional[str], probes: int, seed: int, eps: float = 1e-4):
    """``(estimate, stderr)`` of one layer's Hessian trace.

    ``model`` may be a :class:`Model` (with ``batch = (x, y)``) or a
    :class:`Surface`, in which case ``batch`` is ignored.
    """
    surface = model if isinstance(model, Surface) else ModelSurface(model, batch, [layer])
    name = layer if layer is not None and layer in surface.slices else surface.layer_names[0]
    return hutchinson(surface, probes, seed, [name], eps)[name]


# ---------------------------------------------------------------------------
# pools
# ---------------------------------------------------------------------------


def assign_pools(traces: Sequence[float]) -> list:
    """Tertile rule on the rank order of the traces.

    Rank 0 is the largest trace (ties go to the earlier layer); a layer at rank
    ``r`` of ``L`` gets pool ``HIGH, MID, LOW`` for ``floor(3 r / L) = 0, 1, 2``.
    """
    h = np.asarray(traces, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ContractError("traces must be finite")
    if np.any(h < 0):
        logger.warning("negative trace estimates clamped to 0: %s", np.flatnonzero(h < 0).tolist())
        h = np.maximum(h, 0.0)
    n = len(h)
    order = sorted(range(n), key=lambda i: (-h[i], i))
    pools = [None] * n
    for rank, i in enumerate(order):
        pools[i] = (POOL_HIGH, POOL_MID, POOL_LOW)[min(2, (3 * rank) // n)]
    return pools


@dataclass
class SensitivityProfile:
    layers: list
    traces: list
    stderrs: list
    pools: list
    probes: int
    quality: Optional[str] = None
    param_counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "probes": self.probes,
            "quality": self.quality,
            "order": list(self.layers),
            "layers": {n: {"trace": t, "stderr": (None if not np.isfinite(e) else e), "pool": list(p)}
                       for n, t, e, p in zip(self.layers, self.traces, self.stderrs, self.pools)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityProfile":
        names = d["order"]
        rows = [d["layers"][n] for n in names]
        return cls(names, [r["trace"] for r in rows],
                   [np.inf if r["stderr"] is None else r["stderr"] for r in rows],
                   [tuple(r["pool"]) for r in rows], d["probes"], d.get("quality"))


def profile(model: Model, batch, probes: int = 8, seed: int = 0, quality=None,
            eps: float = 1e-4) -> SensitivityProfile:
    surface = ModelSurface(model, batch)
    est = hutchinson(surface, probes, seed, eps=eps, blockwise=True)
    names = surface.layer_names
    traces = [est[n][0] for n in names]
    return SensitivityProfile(names, traces, [est[n][1] for n in names], assign_pools(traces),
                              probes, None if quality is None else str(quality), model.param_counts)


# ---------------------------------------------------------------------------
# perturbation sweep
# ---------------------------------------------------------------------------


def perturbation_direction(model: Model, traces=None, seed: int = 0, kind: str = "trace",
                           batch=None, iterations: int = 10) -> dict:
    """Unit-norm direction over the quantizable weights, as ``{layer: array}``.

    ``kind="trace"``: Gaussian noise with each layer's block scaled by
    ``sqrt(h_l)``.  ``kind="top"``: power iteration for the leading Hessian
    eigenvector on ``batch``.
    """
    names = [s.name for s in model.quantizable]
    rng = Rng(seed, stream=0xD1)
    if kind == "top":
        surface = ModelSurface(model, batch)
        v = rng.normal(surface.theta.shape)
        for _ in range(iterations):
            v = hvp(surface, v / np.linalg.norm(v))
        v /= np.linalg.norm(v)
        return {n: v[surface.slices[n]].reshape(surface.shapes[n]) for n in names}
    if kind != "trace":
        raise ContractError(f"unknown direction kind {kind!r}")
    h = np.ones(len(names)) if traces is None else np.maximum(np.asarray(traces, np.float64), 0.0)
    blocks = {n: rng.normal(model.weights[n].shape) * np.sqrt(hl) for n, hl in zip(names, h)}
    norm = np.sqrt(np.sum([np.sum(b * b) for b in blocks.values()]))
    if norm == 0:
        raise NumericError("perturbation direction has zero norm")
    return {n: b / norm for n, b in blocks.items()}


def perturbation_sweep(model: Model, batch, amplitudes, direction: dict, actions=None) -> list:
    """Loss at ``theta + t * direction`` for each amplitude ``t`` (0 is always included).

    ``actions`` evaluates the quantized forward at those bit-widths.
    """
    from .model import forward_quantized

    x, y = batch
    amps = sorted(set(float(a) for a in amplitudes) | {0.0})
    out = []
    with T.no_grad():
        for t in amps:
            weights = None
            if t != 0.0:
                weights = {n: T.Tensor((model.weights[n].data + t * d).astype(np.float32))
                           for n, d in direction.items()}
            if actions is None:
                logits = forward(model, x, weights=weights)
            else:
                logits = forward_quantized(model, x, actions, weights=weights)
            out.append((t, T.cross_entropy(logits, y).item()))
    return out
