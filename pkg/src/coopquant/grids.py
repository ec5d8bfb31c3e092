"""Dense BEV grids, 2D poses, deterministic RNG, and the bilinear spatial warp.

Everything downstream (scene simulation, the perception model, calibration,
messaging) moves data around as ``FeatureGrid`` values, so this module also
fixes the conventions: row-major (h, w, c) layout, finite values only, and a
counter-based RNG so that any draw is reproducible from ``(seed, counter)``
alone.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FeatureGrid",
    "Pose2D",
    "RngStream",
    "frobenius_norm",
    "kl_divergence",
    "bilinear_warp",
    "bilinear_warp_backward",
]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class FeatureGrid:
    """Dense H x W x C real-valued grid, row-major.

    ``data`` is always a float64 array of shape (height, width, channels).
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"FeatureGrid data must be 3-D (h, w, c), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("FeatureGrid data contains NaN/Inf")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, height: int, width: int, channels: int) -> "FeatureGrid":
        return cls(np.zeros((height, width, channels)))

    def copy(self) -> "FeatureGrid":
        return FeatureGrid(self.data.copy())

    # -- binary fixture format: three LE u32 shape fields, then LE f32 values
    def to_bytes(self) -> bytes:
        head = struct.pack("<III", self.height, self.width, self.channels)
        return head + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureGrid":
        if len(blob) < 12:
            raise ValueError("truncated FeatureGrid blob")
        h, w, c = struct.unpack_from("<III", blob, 0)
        expect = 12 + 4 * h * w * c
        if len(blob) != expect:
            raise ValueError(f"FeatureGrid blob length {len(blob)} != expected {expect}")
        data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, c)
        return cls(data.astype(np.float64))


def _wrap_angle(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Pose2D:
    """Planar pose: position in meters, yaw in radians, wrapped to (-pi, pi]."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", _wrap_angle(float(self.yaw)))

    def to_world(self, px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return c * px - s * py + self.x, s * px + c * py + self.y

    def to_local(self, wx: np.ndarray, wy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = wx - self.x, wy - self.y
        return c * dx + s * dy, -s * dx + c * dy


# ---------------------------------------------------------------------------
# Counter-based RNG (splitmix64 finalizer over a seed-keyed counter stream)
# ---------------------------------------------------------------------------

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_TWO64 = float(2**64)


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


@dataclass
class RngStream:
    """Deterministic counter-based generator.

    The i-th raw draw is a pure function of (seed, i), so any draw sequence is
    bitwise reproducible across platforms and a stream can be reconstructed
    mid-sequence from its (seed, counter) pair. ``split`` derives statistically
    independent child streams without touching the parent counter.
    """

    seed: int
    counter: int = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _finalize((_U64(self.seed & 0xFFFFFFFFFFFFFFFF) + (idx + _U64(1)) * _GOLDEN))

    def split(self, tag: int) -> "RngStream":
        with np.errstate(over="ignore"):
            child = _finalize(np.array([_U64(self.seed & 0xFFFFFFFFFFFFFFFF) ^ _finalize(
                np.array([_U64(tag & 0xFFFFFFFFFFFFFFFF) + _GOLDEN]))[0]]))[0]
        return RngStream(int(child))

    # -- scalar draws
    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(self.uniform_array(1, lo, hi)[0])

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        return float(self.normal_array(1, mu, sigma)[0])

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return int(self._raw(1)[0] % _U64(n))

    # -- vector draws
    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if lo > hi:
            raise ValueError(f"uniform bounds reversed: {lo} > {hi}")
        u = self._raw(int(np.prod(shape))).astype(np.float64) / _TWO64
        return (lo + (hi - lo) * u).reshape(shape)

    def normal_array(self, shape, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self._raw(2 * n).astype(np.float64)
        u1 = (raw[:n] + 1.0) / (_TWO64 + 1.0)  # (0, 1], keeps log finite
        u2 = raw[n:] / _TWO64
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (mu + sigma * z).reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items: list):
        return items[self.randint(len(items))]


# ---------------------------------------------------------------------------
# Norms and divergences
# ---------------------------------------------------------------------------


def frobenius_norm(g: FeatureGrid) -> float:
    """sqrt of the sum of squared entries."""
    return float(np.sqrt(np.sum(g.data * g.data)))


def _log_softmax(flat: np.ndarray) -> np.ndarray:
    shifted = flat - np.max(flat)
    return shifted - np.log(np.sum(np.exp(shifted)))


def kl_divergence(p: FeatureGrid, q: FeatureGrid) -> float:
    """KL divergence (nats) between softmax distributions of two grids.

    Both grids are flattened and converted to distributions via a joint
    softmax over all H*W*C elements, which makes the divergence well defined
    for arbitrary real-valued activations and invariant to constant shifts.
    """
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    lp = _log_softmax(p.data.ravel())
    lq = _log_softmax(q.data.ravel())
    return max(0.0, float(np.sum(np.exp(lp) * (lp - lq))))


# ---------------------------------------------------------------------------
# Bilinear spatial warp
# ---------------------------------------------------------------------------


def _cell_centers(h: int, w: int, meters_per_cell: float) -> tuple[np.ndarray, np.ndarray]:
    """Local-frame metric coordinates of cell centers; grid centered on origin.

    Column index maps to local x, row index to local y.
    """
    xs = (np.arange(w) + 0.5) * meters_per_cell - 0.5 * w * meters_per_cell
    ys = (np.arange(h) + 0.5) * meters_per_cell - 0.5 * h * meters_per_cell
    return np.meshgrid(xs, ys)  # each (h, w)


def _warp_coords(shape, src: Pose2D, dst: Pose2D, meters_per_cell: float):
    """Fractional source-grid indices for each destination cell."""
    h, w = shape[0], shape[1]
    lx, ly = _cell_centers(h, w, meters_per_cell)
    wx, wy = dst.to_world(lx, ly)
    sx, sy = src.to_local(wx, wy)
    col = sx / meters_per_cell + 0.5 * w - 0.5
    row = sy / meters_per_cell + 0.5 * h - 0.5
    return row, col


def bilinear_warp(g: FeatureGrid, src: Pose2D, dst: Pose2D, meters_per_cell: float) -> FeatureGrid:
    """Resample a grid expressed in ``src``'s frame onto ``dst``'s frame.

    Each destination cell center is mapped through the rigid transform and
    sampled bilinearly from the source grid; out-of-bounds samples are 0.
    """
    if meters_per_cell <= 0:
        raise ValueError("meters_per_cell must be positive")
    if src == dst:
        return g.copy()
    h, w, c = g.shape
    row, col = _warp_coords(g.shape, src, dst, meters_per_cell)

    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0

    out = np.zeros((h, w, c))
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc = r0 + dr, c0 + dc
        wgt = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rv = np.where(valid, rr, 0)
        cv = np.where(valid, cc, 0)
        out += (wgt * valid)[..., None] * g.data[rv, cv, :]
    return FeatureGrid(out)


def bilinear_warp_backward(grad_out: np.ndarray, src: Pose2D, dst: Pose2D,
                           meters_per_cell: float) -> np.ndarray:
    """Adjoint of ``bilinear_warp`` w.r.t. the source grid (scatter-add)."""
    if src == dst:
        return grad_out.copy()
    h, w, c = grad_out.shape
    row, col = _warp_coords(grad_out.shape, src, dst, meters_per_cell)
    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0

    grad_src = np.zeros((h, w, c))
    flat = grad_src.reshape(h * w, c)
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc = r0 + dr, c0 + dc
        wgt = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx = (rr * w + cc)[valid]
        np.add.at(flat, idx, (wgt[valid])[:, None] * grad_out[valid])
    return grad_src
