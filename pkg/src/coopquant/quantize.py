"""Affine quantization primitives: max-min parameter init, quantize /
dequantize / fake-quantize, scale grid search, learnable rounding, and
bit-width memory accounting.

Conventions fixed here and relied on everywhere else:
  - unsigned asymmetric integer range [0, 2^b - 1];
  - rounding is half-to-even (``np.rint``) for cross-platform bit-exactness;
  - per-channel granularity groups along axis 0 (output channels);
  - degenerate ranges (constant tensors) use s = 1 so the constant round-trips.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantParams",
    "RoundingVars",
    "init_maxmin",
    "quantize",
    "dequantize",
    "fake_quant",
    "quantize_with_rounding",
    "fake_quant_with_rounding",
    "scale_search",
    "adaround_optimize",
    "model_size_bytes",
]


@dataclass
class QuantParams:
    scale: np.ndarray  # () for per_tensor, (C,) for per_channel
    zero_point: np.ndarray  # int64, same shape as scale
    bits: int
    granularity: str  # "per_tensor" | "per_channel"

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.int64)
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive elementwise")
        if np.any(self.zero_point < self.q_int_min) or np.any(self.zero_point > self.q_int_max):
            raise ValueError("zero_point outside integer range")

    @property
    def q_int_min(self) -> int:
        return 0

    @property
    def q_int_max(self) -> int:
        return 2 ** self.bits - 1

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        """Scale/zero-point shaped to broadcast against an ndim-tensor."""
        if self.granularity == "per_tensor" or ndim == 0:
            return self.scale, self.zero_point
        shape = (-1,) + (1,) * (ndim - 1)
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def copy(self) -> "QuantParams":
        return QuantParams(self.scale.copy(), self.zero_point.copy(), self.bits, self.granularity)


def _group_minmax(x: np.ndarray, granularity: str) -> tuple[np.ndarray, np.ndarray]:
    if granularity == "per_tensor" or x.ndim == 1:
        return np.asarray(x.min()), np.asarray(x.max())
    axes = tuple(range(1, x.ndim))
    return x.min(axis=axes), x.max(axis=axes)


def _zero_point_for(scale: np.ndarray, xmin: np.ndarray, bits: int) -> np.ndarray:
    z = np.rint(-xmin / scale)
    return np.clip(z, 0, 2 ** bits - 1).astype(np.int64)


def init_maxmin(x: np.ndarray, bits: int, granularity: str = "per_tensor") -> QuantParams:
    """Max-min calibration: s = (X_max - X_min) / (2^b - 1) per group.

    Constant groups fall back to s = 1 with z chosen so the constant value
    round-trips exactly when representable.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot calibrate a tensor with NaN/Inf")
    xmin, xmax = _group_minmax(x, granularity)
    span = xmax - xmin
    levels = 2 ** bits - 1
    scale = np.where(span > 0, span / levels, 1.0)
    z = _zero_point_for(scale, xmin, bits)
    gran = granularity if x.ndim > 1 else "per_tensor"
    return QuantParams(scale, z, bits, gran)


def quantize(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """clamp(rint(x / s) + z, q_min, q_max), as int64."""
    x = np.asarray(x, dtype=np.float64)
    s, z = qp.broadcast(x.ndim)
    xi = np.rint(x / s).astype(np.int64) + z
    return np.clip(xi, qp.q_int_min, qp.q_int_max)


def dequantize(xi: np.ndarray, qp: QuantParams) -> np.ndarray:
    s, z = qp.broadcast(np.asarray(xi).ndim)
    return s * (np.asarray(xi, dtype=np.float64) - z)


def fake_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, qp), qp)


def quantize_with_rounding(w: np.ndarray, qp: QuantParams, up: np.ndarray) -> np.ndarray:
    """Quantize with explicit per-element rounding directions.

    ``up`` is 0/1 per weight: floor(w/s) + up replaces round-to-nearest."""
    s, z = qp.broadcast(w.ndim)
    xi = np.floor(w / s).astype(np.int64) + np.asarray(up, dtype=np.int64) + z
    return np.clip(xi, qp.q_int_min, qp.q_int_max)


def fake_quant_with_rounding(w: np.ndarray, qp: QuantParams, up: np.ndarray) -> np.ndarray:
    return dequantize(quantize_with_rounding(w, qp, up), qp)


# ---------------------------------------------------------------------------
# Scale grid search
# ---------------------------------------------------------------------------


def _candidate_scales(s0: float, alpha: float, beta: float, T: int) -> np.ndarray:
    cand = np.linspace(alpha * s0, beta * s0, T)
    if T > 1 and alpha <= 1.0 <= beta and not np.any(cand == s0):
        cand = np.sort(np.append(cand, s0))
    return cand


def scale_search(x: np.ndarray, qp0: QuantParams, alpha: float = 0.5,
                 beta: float = 1.2, T: int = 100) -> QuantParams:
    """Pick, per granularity group, the candidate scale in [alpha*s0, beta*s0]
    minimizing the squared Frobenius reconstruction error.

    The zero-point is recomputed for every candidate from the group minimum;
    candidates are evaluated in ascending order so ties resolve toward the
    smaller scale. The initial scale s0 itself joins the grid whenever
    alpha <= 1 <= beta (and T > 1).
    """
    if not (0 < alpha <= beta) or T < 1:
        raise ValueError("need 0 < alpha <= beta and T >= 1")
    x = np.asarray(x, dtype=np.float64)
    xmin, _ = _group_minmax(x, qp0.granularity)

    if qp0.granularity == "per_tensor" or x.ndim == 1:
        best_s, best_z = None, None
        best_err = math.inf
        for s in _candidate_scales(float(qp0.scale), alpha, beta, T):
            z = _zero_point_for(np.asarray(s), float(xmin), qp0.bits)
            qp = QuantParams(s, z, qp0.bits, "per_tensor")
            err = float(np.sum((x - fake_quant(x, qp)) ** 2))
            if err < best_err:
                best_err, best_s, best_z = err, s, z
        return QuantParams(best_s, best_z, qp0.bits, qp0.granularity)

    n = x.shape[0]
    flat = x.reshape(n, -1)
    scales = np.empty(n)
    zps = np.empty(n, dtype=np.int64)
    for g in range(n):
        qp_g = QuantParams(qp0.scale[g], qp0.zero_point[g], qp0.bits, "per_tensor")
        got = scale_search(flat[g], qp_g, alpha, beta, T)
        scales[g] = got.scale
        zps[g] = got.zero_point
    return QuantParams(scales, zps, qp0.bits, "per_channel")


# ---------------------------------------------------------------------------
# Learnable rounding (AdaRound-style)
# ---------------------------------------------------------------------------


def _rect_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip(1.2 / (1.0 + np.exp(-v)) - 0.1, 0.0, 1.0)


def _rect_sigmoid_grad(v: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-v))
    inner = 1.2 * sig - 0.1
    return np.where((inner > 0.0) & (inner < 1.0), 1.2 * sig * (1.0 - sig), 0.0)


@dataclass
class RoundingVars:
    """Per-weight auxiliary rounding variables; h(v) in [0, 1] elementwise."""

    v: np.ndarray

    @property
    def h(self) -> np.ndarray:
        return _rect_sigmoid(self.v)

    @property
    def up(self) -> np.ndarray:
        """Hard rounding directions (0/1) for deployment."""
        return (self.h >= 0.5).astype(np.int64)


def _init_rounding(w: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Start h at the fractional part of w/s (round-to-nearest equivalent)."""
    s, _ = qp.broadcast(w.ndim)
    rest = w / s - np.floor(w / s)
    target = np.clip((rest + 0.1) / 1.2, 1e-4, 1.0 - 1e-4)
    return np.log(target / (1.0 - target))


def regularizer(h: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """sum(1 - |2h - 1|^beta) and its gradient w.r.t. h."""
    t = 2.0 * h - 1.0
    a = np.abs(t)
    val = float(np.sum(1.0 - a ** beta))
    grad = -2.0 * beta * np.where(a > 0, a ** (beta - 1.0), 0.0) * np.sign(t)
    return val, grad


def soft_quant_weight(w: np.ndarray, qp: QuantParams, h: np.ndarray):
    """Soft-rounded fake-quant weights and dW_tilde/dh (both elementwise)."""
    s, z = qp.broadcast(w.ndim)
    raw = np.floor(w / s) + h + z
    clipped = np.clip(raw, qp.q_int_min, qp.q_int_max)
    in_range = (raw > qp.q_int_min) & (raw < qp.q_int_max)
    w_tilde = s * (clipped - z)
    return w_tilde, s * in_range


def adaround_loss_and_grad(v: np.ndarray, w: np.ndarray, qp: QuantParams,
                           block_inputs: list[np.ndarray], fp_outputs: list[np.ndarray],
                           block_apply, beta: float, lambda_reg: float):
    """Objective sum_i ||apply(W_tilde, x_i) - fp_i||_F^2 / n + reg, with its
    analytic gradient w.r.t. v."""
    h = _rect_sigmoid(v)
    w_tilde, dwt_dh = soft_quant_weight(w, qp, h)
    n = len(block_inputs)
    loss = 0.0
    gw = np.zeros_like(w)
    for x, fp in zip(block_inputs, fp_outputs):
        out = block_apply.forward(w_tilde, x)
        diff = out - fp
        loss += float(np.sum(diff * diff)) / n
        gw += block_apply.weight_grad(w_tilde, x, 2.0 * diff / n)
    rval, rgrad_h = regularizer(h, beta)
    loss += lambda_reg * rval
    grad_v = (gw * dwt_dh + lambda_reg * rgrad_h) * _rect_sigmoid_grad(v)
    return loss, grad_v


def adaround_optimize(w: np.ndarray, qp: QuantParams, block_inputs: list[np.ndarray],
                      fp_outputs: list[np.ndarray], block_apply, iters: int = 300,
                      lr: float = 0.05, anneal: tuple[float, float] = (20.0, 2.0),
                      lambda_reg: float = 0.01, rng=None) -> RoundingVars:
    """Learn per-weight rounding directions against block reconstruction error.

    ``block_apply`` must expose ``forward(W, x) -> y`` and
    ``weight_grad(W, x, gy) -> dW``. Adam minimizes the reconstruction loss
    plus a rectification regularizer whose exponent anneals from beta_hi down
    to beta_lo, pushing every h toward {0, 1}.
    """
    v = _init_rounding(w, qp)
    beta_hi, beta_lo = anneal
    m = np.zeros_like(v)
    s2 = np.zeros_like(v)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(iters):
        frac = t / max(1, iters - 1)
        beta = beta_hi + (beta_lo - beta_hi) * frac
        _, g = adaround_loss_and_grad(v, w, qp, block_inputs, fp_outputs,
                                      block_apply, beta, lambda_reg)
        m = b1 * m + (1 - b1) * g
        s2 = b2 * s2 + (1 - b2) * g * g
        mh = m / (1 - b1 ** (t + 1))
        sh = s2 / (1 - b2 ** (t + 1))
        v = v - lr * mh / (np.sqrt(sh) + eps)

    rv = RoundingVars(v)
    h = rv.h
    undecided = int(np.sum((h > 0.01) & (h < 0.99)))
    if undecided:
        warnings.warn(f"adaround: {undecided} rounding variables did not converge to 0/1",
                      stacklevel=2)
    return rv


# ---------------------------------------------------------------------------
# Memory accounting
# ---------------------------------------------------------------------------

_GROUP_OVERHEAD_BYTES = 8  # f32 scale + i32 zero-point per granularity group


def model_size_bytes(params, bits_weights: int, granularity: str = "per_tensor") -> int:
    """Serialized weight payload plus quantization-parameter overhead.

    Each tensor contributes ceil(count * b / 8) payload bytes; every
    granularity group (whole tensor, or one output channel for multi-axis
    tensors under per-channel) adds an 8-byte scale/zero-point record.
    """
    if bits_weights not in (4, 8, 16, 32):
        raise ValueError("bits must be one of 4, 8, 16, 32")
    total = 0
    for t in params.tensors.values():
        total += -(-t.size * bits_weights // 8)  # ceil division
        if granularity == "per_channel" and t.ndim > 1:
            total += _GROUP_OVERHEAD_BYTES * t.shape[0]
        else:
            total += _GROUP_OVERHEAD_BYTES
    return total
