"""Per-tensor fake quantization with straight-through gradients.

Conventions:

* ``scale`` multiplies on dequantize: ``q = clamp(round(x / scale + zero_point))``
  and ``x_hat = (q - zero_point) * scale``.
* rounding is half-away-from-zero; clamping happens after rounding.
* affine integers live in ``[0, 2**bits - 1]``; symmetric integers in
  ``[-(2**(bits-1) - 1), 2**(bits-1) - 1]`` with ``zero_point == 0``.
  Symmetric 1-bit is binary (``{-1, +1}``, scale = mean |x|) because the
  formula above collapses to the single level 0 there.
* 0 bits is not a quantizer; callers treat it as pruning (see ``PRUNE_BITS``).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor, custom_op

AFFINE = "affine"
SYMMETRIC = "symmetric"
MODES = (AFFINE, SYMMETRIC)
PRUNE_BITS = 0
FULL_BITS = 32

_state = threading.local()


def qrange(bits: int, mode: str) -> tuple[int, int]:
    if mode == AFFINE:
        return 0, (1 << bits) - 1
    if bits == 1:
        return -1, 1
    m = (1 << (bits - 1)) - 1
    return -m, m


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: float
    bits: int
    mode: str = SYMMETRIC

    def __post_init__(self):
        _check_bits(self.bits)
        if self.mode not in MODES:
            raise ContractError(f"unknown quantization mode {self.mode!r}")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ContractError(f"scale must be positive and finite, got {self.scale}")
        if self.mode == SYMMETRIC and self.zero_point != 0:
            raise ContractError("symmetric mode requires zero_point == 0")

    @property
    def qmin(self) -> int:
        return qrange(self.bits, self.mode)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits, self.mode)[1]

    @property
    def binary(self) -> bool:
        return self.mode == SYMMETRIC and self.bits == 1

    def representable(self) -> tuple[float, float]:
        """Float interval covered by the integer grid."""
        return (self.qmin - self.zero_point) * self.scale, (self.qmax - self.zero_point) * self.scale


def _check_bits(bits):
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 32:
        raise ContractError(f"bits must be an integer in 1..32, got {bits!r}")


def _array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.trunc(x + np.copysign(0.5, x).astype(x.dtype, copy=False))


def calibrate(t, bits: int, mode: str = SYMMETRIC, include_zero: bool = False) -> QuantParams:
    """Min/max calibration of ``t`` to a ``bits``-wide grid.

    ``include_zero`` widens the affine range to contain 0, so non-negative
    activations get ``zero_point == 0``.
    """
    _check_bits(bits)
    x = _array(t)
    if x.size == 0:
        raise ContractError("cannot calibrate an empty tensor")
    lo, hi = float(x.min()), float(x.max())
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ContractError("cannot calibrate a non-finite tensor")
    qmin, qmax = qrange(bits, mode)
    if mode == AFFINE:
        if include_zero:
            lo, hi = min(lo, 0.0), max(hi, 0.0)
        if hi == lo:
            # constant: s = 1 and z = -c put c exactly on integer 0
            return QuantParams(1.0, -hi, bits, AFFINE)
        s = (hi - lo) / (qmax - qmin)
        z = float(round_half_away(np.float64(qmax - hi / s)))
        return QuantParams(s, z, bits, AFFINE)
    if mode != SYMMETRIC:
        raise ContractError(f"unknown quantization mode {mode!r}")
    if bits == 1:
        m = float(np.abs(x).mean(dtype=np.float64))
        return QuantParams(m if m > 0 else 1.0, 0.0, bits, SYMMETRIC)
    amax = max(abs(lo), abs(hi))
    if hi == lo:
        # constant: z must stay 0, so the scale is chosen to put c on +-1
        return QuantParams(amax if amax > 0 else 1.0, 0.0, bits, SYMMETRIC)
    return QuantParams(amax / qmax, 0.0, bits, SYMMETRIC)


def _quantize_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    if p.binary:
        return np.where(x >= 0, 1, -1).astype(x.dtype)
    v = x / x.dtype.type(p.scale) + x.dtype.type(p.zero_point)
    return np.clip(round_half_away(v), p.qmin, p.qmax)


def _dequantize_array(q: np.ndarray, p: QuantParams) -> np.ndarray:
    return (q - q.dtype.type(p.zero_point)) * q.dtype.type(p.scale)


def quantize(t, p: QuantParams) -> Tensor:
    """Integer grid values (stored as floats); carries no gradient history."""
    x = _array(t)
    return Tensor(_quantize_array(x, p), dtype=x.dtype if x.dtype.kind == "f" else None)


def dequantize(q, p: QuantParams) -> Tensor:
    qa = _array(q)
    if qa.dtype.kind != "f":
        qa = qa.astype(np.float32)
    if np.any(qa != np.round(qa)) or np.any(qa < p.qmin) or np.any(qa > p.qmax):
        raise ContractError(f"dequantize expects integers in [{p.qmin}, {p.qmax}]")
    if p.binary and np.any(qa == 0):
        raise ContractError("binary grid has no 0 level")
    return Tensor(_dequantize_array(qa, p), dtype=qa.dtype)


def fake_quant(t: Tensor, p: QuantParams, rounding: bool = True) -> Tensor:
    """``dequantize(quantize(t))`` with a clipped straight-through gradient.

    With ``rounding=False`` the grid transform and its inverse are applied
    without rounding or clamping, and the gradient is the identity.
    """
    x = t.data
    if not rounding:
        s, z = x.dtype.type(p.scale), x.dtype.type(p.zero_point)
        return custom_op((x / s + z - z) * s, (t,), lambda g: (g,))
    out = _dequantize_array(_quantize_array(x, p), p)
    lo, hi = p.representable()
    # float32 inputs at the calibrated extremes can sit an ulp outside
    lo, hi = lo - 1e-6 * abs(lo), hi + 1e-6 * abs(hi)
    inside = np.ones(x.shape, bool) if p.binary else (x >= lo) & (x <= hi)
    out = _straight_through_replay(x, out, inside)
    if p.binary:
        return custom_op(out, (t,), lambda g: (g,))
    if inside.all():
        return custom_op(out, (t,), lambda g: (g,))
    return custom_op(out, (t,), lambda g: (g * inside,))


@contextmanager
def frozen_rounding(records: list, record: bool = False):
    """Record or replay the rounding residual of every ``fake_quant`` call.

    On replay each call returns ``x + (q0 - x0)`` inside the clip range and
    the recorded ``q0`` outside it, in call order.  That is the function
    whose exact gradient the straight-through estimator reports, so finite
    differences of a replayed forward pass can check STE gradients.
    """
    prev = getattr(_state, "rounding", None)
    _state.rounding = (records, record, [0])
    try:
        yield records
    finally:
        _state.rounding = prev


def _straight_through_replay(x: np.ndarray, out: np.ndarray, inside: np.ndarray) -> np.ndarray:
    frozen = getattr(_state, "rounding", None)
    if frozen is None:
        return out
    records, record, pos = frozen
    if record:
        records.append((out - x, out.copy(), inside))
        return out
    if pos[0] >= len(records) or records[pos[0]][0].shape != x.shape:
        raise ContractError("replayed quantization does not match the recorded forward pass")
    resid, q0, mask = records[pos[0]]
    pos[0] += 1
    return np.where(mask, x + resid, q0).astype(x.dtype, copy=False)


def exact_mode(t: Tensor, p: QuantParams) -> Tensor:
    return fake_quant(t, p, rounding=False)


def layer_size_bits(param_count: int, bits: int) -> int:
    """Storage of one layer's weights; 0 bits means the layer is pruned."""
    if param_count <= 0 or bits < 0:
        raise ContractError("param_count must be positive and bits non-negative")
    return int(param_count) * int(bits)


def is_pruned(bits: int) -> bool:
    return bits == PRUNE_BITS
