"""Inter-agent messaging: bit-exact wire format for codebook indices,
bandwidth accounting, a jittered transmission-latency model, and the
system-level evaluation loop that feeds stale remote features into fusion.

The wire header is a fixed 27 bytes (little-endian): sender u32, frame
timestamp u64, codebook hash u64, height u16, width u16, n_L u16, n_R u8.
Poses are not serialized — the simulation reads them from scenario state.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .codebook import Codebook, MessagePayload, assign, reconstruct
from .grids import FeatureGrid, RngStream, bilinear_warp
from .model import DetectionGrid, ModelParams, conv3x3, linear_cell, relu, \
    sample_observation, softmax_over_agents
from .scene import Scenario, perturb_pose

__all__ = [
    "WireError",
    "TruncatedPayloadError",
    "IndexRangeError",
    "CodebookHashMismatchError",
    "WireMessage",
    "ChannelModel",
    "LatencyProfile",
    "LatencyBreakdown",
    "ChannelCompressor",
    "fit_compressor",
    "compressor_loss_and_grad",
    "train_compressor",
    "raw_feature_bytes",
    "codebook_message_bytes",
    "index_bits",
    "pack_indices",
    "unpack_indices",
    "sample_comm_latency",
    "simulate_system",
]


class WireError(ValueError):
    """Base class for wire-format decoding failures."""


class TruncatedPayloadError(WireError):
    pass


class IndexRangeError(WireError):
    pass


class CodebookHashMismatchError(WireError):
    pass


HEADER_FMT = "<IQQHHHB"
HEADER_BYTES = struct.calcsize(HEADER_FMT)  # 27


def index_bits(n_L: int) -> int:
    if n_L < 2:
        raise ValueError("n_L must be >= 2")
    return max(1, math.ceil(math.log2(n_L)))


def raw_feature_bytes(h: int, w: int, c: int, bits_per_value: int) -> int:
    """Uncompressed feature payload: h*w*c values at the given bit width."""
    if min(h, w, c, bits_per_value) < 1:
        raise ValueError("all counts must be >= 1")
    return -(-h * w * c * bits_per_value // 8)


def codebook_message_bytes(h: int, w: int, n_L: int, n_R: int) -> int:
    """Index payload (ceil to bytes) plus the fixed header."""
    return -(-h * w * n_R * index_bits(n_L) // 8) + HEADER_BYTES


def pack_indices(msg: MessagePayload, n_L: int) -> bytes:
    """Row-major, n_R-minor, LSB-first bit packing of the code indices."""
    if np.any(msg.indices >= n_L):
        raise ValueError("index out of range for n_L")
    bits = index_bits(n_L)
    flat = msg.indices.reshape(-1).astype(np.uint64)
    bit_rows = (flat[:, None] >> np.arange(bits, dtype=np.uint64)) & np.uint64(1)
    return np.packbits(bit_rows.astype(np.uint8).reshape(-1),
                       bitorder="little").tobytes()


def unpack_indices(payload: bytes, height: int, width: int, n_L: int,
                   n_R: int) -> MessagePayload:
    bits = index_bits(n_L)
    total_bits = height * width * n_R * bits
    need = -(-total_bits // 8)
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, need {need}")
    raw = np.frombuffer(payload[:need], dtype=np.uint8)
    bit_arr = np.unpackbits(raw, bitorder="little")[:total_bits]
    vals = bit_arr.reshape(-1, bits).astype(np.int64) @ (1 << np.arange(bits))
    if np.any(vals >= n_L):
        raise IndexRangeError("decoded index exceeds codebook size")
    return MessagePayload(vals.reshape(height, width, n_R))


@dataclass
class WireMessage:
    sender_id: int
    frame_timestamp_ms: int
    codebook_hash: int
    height: int
    width: int
    n_L: int
    n_R: int
    payload: bytes

    def to_bytes(self) -> bytes:
        head = struct.pack(HEADER_FMT, self.sender_id, self.frame_timestamp_ms,
                           self.codebook_hash, self.height, self.width,
                           self.n_L, self.n_R)
        return head + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WireMessage":
        if len(blob) < HEADER_BYTES:
            raise TruncatedPayloadError(
                f"message has {len(blob)} bytes, header needs {HEADER_BYTES}")
        fields = struct.unpack_from(HEADER_FMT, blob)
        msg = cls(*fields, payload=blob[HEADER_BYTES:])
        need = -(-msg.height * msg.width * msg.n_R * index_bits(msg.n_L) // 8)
        if len(msg.payload) < need:
            raise TruncatedPayloadError(
                f"payload has {len(msg.payload)} bytes, need {need}")
        return msg

    @classmethod
    def encode(cls, sender_id: int, timestamp_ms: float, f: FeatureGrid,
               cb: Codebook, n_R: int) -> "WireMessage":
        msg = assign(f, cb, n_R)
        return cls(sender_id, int(round(timestamp_ms)), cb.version_hash,
                   msg.height, msg.width, cb.n_L, n_R,
                   pack_indices(msg, cb.n_L))

    def decode(self, cb: Codebook) -> FeatureGrid:
        if self.codebook_hash != cb.version_hash:
            raise CodebookHashMismatchError(
                "sender and receiver codebooks differ")
        payload = unpack_indices(self.payload, self.height, self.width,
                                 self.n_L, self.n_R)
        return reconstruct(payload, cb)


# ---------------------------------------------------------------------------
# Channel + latency model
# ---------------------------------------------------------------------------


@dataclass
class ChannelModel:
    rate_mbps: float = 27.0
    jitter_ms: tuple[float, float] = (0.0, 200.0)

    def __post_init__(self):
        if self.rate_mbps <= 0:
            raise ValueError("rate must be positive")
        lo, hi = self.jitter_ms
        if lo > hi or lo < 0:
            raise ValueError("jitter interval must satisfy 0 <= lo <= hi")


@dataclass
class LatencyProfile:
    """Per-precision local-inference and fusion latencies in milliseconds.

    Defaults split the configured end-to-end model times (59.5 ms fp32,
    27.1 ms int8) 80/20 between local inference and fusion."""

    t_local_ms: dict = field(default_factory=lambda: {"fp32": 47.6, "int8": 21.68})
    t_fus_ms: dict = field(default_factory=lambda: {"fp32": 11.9, "int8": 5.42})

    def __post_init__(self):
        for d in (self.t_local_ms, self.t_fus_ms):
            if any(v < 0 for v in d.values()):
                raise ValueError("latencies must be non-negative")


def sample_comm_latency(size_bytes: int, channel: ChannelModel,
                        rng: RngStream) -> float:
    """size*8 / (rate_mbps*1000) ms plus one uniform jitter draw."""
    if size_bytes < 0:
        raise ValueError("size must be non-negative")
    lo, hi = channel.jitter_ms
    return size_bytes * 8.0 / (channel.rate_mbps * 1000.0) + rng.uniform(lo, hi)


@dataclass
class LatencyBreakdown:
    """Per-link latency components; always t_sys = t_local + t_comm + t_fus."""

    rows: list = field(default_factory=list)  # (frame, link, local, comm, fus, sys)

    def add(self, frame: int, link: int, t_local: float, t_comm: float,
            t_fus: float):
        self.rows.append((frame, link, t_local, t_comm, t_fus,
                          t_local + t_comm + t_fus))

    def mean_t_sys(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r[5] for r in self.rows]))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "link", "t_local", "t_comm", "t_fus", "t_sys"])
            for row in self.rows:
                w.writerow([row[0], row[1]] + [f"{v:.6f}" for v in row[2:]])


# ---------------------------------------------------------------------------
# x16 linear channel compressor (fp32 baseline)
# ---------------------------------------------------------------------------


@dataclass
class ChannelCompressor:
    """1x1 linear channel compressor: C -> C/factor -> C."""

    down: np.ndarray  # (C/k, C)
    up: np.ndarray  # (C, C/k)
    mean: np.ndarray  # (C,)

    @property
    def factor(self) -> int:
        return self.up.shape[0] // self.up.shape[1]

    def encode(self, f: FeatureGrid) -> np.ndarray:
        return (f.data - self.mean) @ self.down.T

    def decode(self, z: np.ndarray) -> FeatureGrid:
        return FeatureGrid(z @ self.up.T + self.mean)

    def round_trip(self, f: FeatureGrid) -> FeatureGrid:
        return self.decode(self.encode(f))


def fit_compressor(features: list[FeatureGrid], factor: int = 16) -> ChannelCompressor:
    """PCA fit of the channel-compressing map on training features."""
    mat = np.concatenate([f.data.reshape(-1, f.channels) for f in features])
    c = mat.shape[1]
    if c % factor != 0:
        raise ValueError(f"channel count {c} not divisible by factor {factor}")
    k = c // factor
    mean = mat.mean(axis=0)
    centered = mat - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:k]  # (k, C)
    return ChannelCompressor(down=basis, up=basis.T, mean=mean)


def compressor_loss_and_grad(params: ModelParams, comp: ChannelCompressor,
                             scenario: Scenario, frame_idx: int, ego_id: int):
    """Detection loss with remote features passed through the compressor
    round trip; analytic gradients for the down/up maps only (the pipeline
    weights stay frozen). Returns (loss, g_down, g_up)."""
    from .model import (conv3x3_backward, detection_loss, linear_cell_backward,
                        relu_backward)
    from .grids import bilinear_warp_backward
    from .scene import detection_targets

    present = sorted(a.id for a in scenario.agents)
    mpc = scenario.meters_per_cell
    targets = detection_targets(scenario, frame_idx, ego_id)
    ego_pose = scenario.agent(ego_id).pose
    wfn, afn = _quant_fns(None)

    feats = []
    zp_cache = {}  # aid -> (Z, Z @ down.T) for the backward pass
    for aid in present:
        m = scenario.agent(aid).modality_tag
        x0 = sample_observation(scenario, aid, frame_idx)
        f = _encode_obs(x0, m, params, wfn, afn)
        if aid == ego_id:
            feats.append(f)
            continue
        h, w, c = f.shape
        z = (f - comp.mean).reshape(-1, c)
        zp = z @ comp.down.T
        fhat = (zp @ comp.up.T + comp.mean).reshape(h, w, c)
        zp_cache[aid] = (z, zp)
        feats.append(bilinear_warp(FeatureGrid(fhat),
                                   scenario.agent(aid).pose, ego_pose, mpc).data)

    u, bs = params.weight("fusion.score"), params.bias("fusion.score")
    scores = [linear_cell(f, u, bs)[..., 0] for f in feats]
    weights = softmax_over_agents(scores)
    fused_pre = sum(w[..., None] * f for w, f in zip(weights, feats))
    fpre = conv3x3(fused_pre, params.weight("fusion.conv"),
                   params.bias("fusion.conv"))
    fused = relu(fpre)
    out = linear_cell(fused, params.weight("head"), params.bias("head"))
    loss, gout = detection_loss(out, targets)

    gfused, _, _ = linear_cell_backward(gout, fused, params.weight("head"))
    gfpre = relu_backward(gfused, fused)
    gfused_pre, _, _ = conv3x3_backward(gfpre, fused_pre,
                                        params.weight("fusion.conv"))
    gfeats = [w[..., None] * gfused_pre for w in weights]
    gw_list = [np.sum(gfused_pre * f, axis=2) for f in feats]
    wsum = sum(w * gw for w, gw in zip(weights, gw_list))
    gscores = [w * (gw - wsum) for w, gw in zip(weights, gw_list)]
    for k, f in enumerate(feats):
        gf, _, _ = linear_cell_backward(gscores[k][..., None], f, u)
        gfeats[k] = gfeats[k] + gf

    g_down = np.zeros_like(comp.down)
    g_up = np.zeros_like(comp.up)
    for k, aid in enumerate(present):
        if aid == ego_id:
            continue
        gfhat = bilinear_warp_backward(gfeats[k], scenario.agent(aid).pose,
                                       ego_pose, mpc)
        g = gfhat.reshape(-1, comp.up.shape[0])
        z, zp = zp_cache[aid]
        g_up += g.T @ zp
        g_down += (g @ comp.up).T @ z
    return loss, g_down, g_up


def train_compressor(model: ModelParams, comp: ChannelCompressor,
                     scenarios: list[Scenario], iters: int = 2,
                     lr: float = 0.01, seed: int = 0) -> ChannelCompressor:
    """Fine-tune the channel-compressing map on the detection objective,
    pipeline weights frozen; plain SGD over (scenario, frame) pairs with
    rotating egos, mirroring the joint codebook schedule."""
    down, up = comp.down.copy(), comp.up.copy()
    tuned = ChannelCompressor(down=down, up=up, mean=comp.mean.copy())
    if iters == 0:
        return tuned
    samples = [(si, fi, (si + fi) % len(scn.agents))
               for si, scn in enumerate(scenarios)
               for fi in range(len(scn.frames))]
    rng = RngStream(seed)
    for _ in range(iters):
        order = list(samples)
        rng.shuffle(order)
        for si, fi, ego in order:
            loss, g_down, g_up = compressor_loss_and_grad(
                model, tuned, scenarios[si], fi, ego)
            if not math.isfinite(loss):
                raise FloatingPointError(f"compressor training loss became {loss}")
            down -= lr * g_down
            up -= lr * g_up
    return tuned


# ---------------------------------------------------------------------------
# System-level simulation
# ---------------------------------------------------------------------------


def _quant_fns(quantized):
    from .model import _identity_w, _identity_a

    if quantized is None:
        return _identity_w, _identity_a
    return quantized.weight_fn(), quantized.act_fn()


def _encode_obs(x, modality, params, wfn, afn):
    for layer in ("c1", "c2"):
        name = f"enc.{modality}.{layer}"
        x = relu(conv3x3(afn(name, x), wfn(name, params.weight(name)),
                         params.bias(name)))
    return x


def _fuse_head(feats, params, wfn, afn):
    scores = [linear_cell(afn("fusion.score", f),
                          wfn("fusion.score", params.weight("fusion.score")),
                          params.bias("fusion.score"))[..., 0] for f in feats]
    weights = softmax_over_agents(scores)
    fused_pre = sum(w[..., None] * f for w, f in zip(weights, feats))
    fused = relu(conv3x3(afn("fusion.conv", fused_pre),
                         wfn("fusion.conv", params.weight("fusion.conv")),
                         params.bias("fusion.conv")))
    return linear_cell(afn("head", fused), wfn("head", params.weight("head")),
                       params.bias("head"))


def simulate_system(scenario: Scenario, ego_id: int, params: ModelParams,
                    transport: str, channel: ChannelModel,
                    latency: LatencyProfile, pose_noise=(0.0, 0.0),
                    seed: int = 0, quantized=None, codebook: Codebook | None = None,
                    receiver_codebook: Codebook | None = None, n_R: int = 1,
                    compressor: ChannelCompressor | None = None,
                    feature_bits: int = 32):
    """Run the pipeline frame by frame with latency-induced staleness.

    Each remote agent's contribution comes from the newest frame whose
    timestamp plus end-to-end latency is at or before the current frame time;
    early frames may be ego-only. Returns (detections per frame,
    LatencyBreakdown)."""
    if transport not in ("raw_fp32", "compressed_fp32", "codebook"):
        raise ValueError(f"unknown transport {transport!r}")
    if transport == "codebook":
        if codebook is None:
            raise ValueError("codebook transport needs a codebook")
        rx = receiver_codebook or codebook
        if rx.version_hash != codebook.version_hash:
            raise CodebookHashMismatchError(
                "sender and receiver codebooks differ")
    if transport == "compressed_fp32" and compressor is None:
        raise ValueError("compressed transport needs a fitted compressor")

    mode = "int8" if quantized is not None else "fp32"
    wfn, afn = _quant_fns(quantized)
    h, w = scenario.grid_shape
    c = params.channels
    if transport == "raw_fp32":
        msg_bytes = raw_feature_bytes(h, w, c, feature_bits)
    elif transport == "compressed_fp32":
        msg_bytes = raw_feature_bytes(h, w, c // compressor.factor, feature_bits)
    else:
        msg_bytes = codebook_message_bytes(h, w, codebook.n_L, n_R)

    t_local = latency.t_local_ms[mode]
    t_fus = latency.t_fus_ms[mode]
    remote_ids = sorted(a.id for a in scenario.agents if a.id != ego_id)
    timestamps = [ts for ts, _ in scenario.frames]
    n_frames = len(timestamps)
    root = RngStream(seed)

    # per (link, source frame) end-to-end latency; drawn once, reused by the
    # staleness search so serial and parallel evaluation orders agree
    t_sys = {}
    breakdown = LatencyBreakdown()
    for li, aid in enumerate(remote_ids):
        for fi in range(n_frames):
            rng = root.split(1_000_003 * aid + fi)
            t_comm = sample_comm_latency(msg_bytes, channel, rng)
            t_sys[(aid, fi)] = t_local + t_comm + t_fus
            breakdown.add(fi, aid, t_local, t_comm, t_fus)

    ego_pose = scenario.agent(ego_id).pose
    mpc = scenario.meters_per_cell
    outputs = []
    # feats stay in sorted-agent order (ego in place) so the ideal-channel
    # case is bitwise identical to the direct pipeline forward
    for fi in range(n_frames):
        now = timestamps[fi]
        feats = []
        for aid in sorted(a.id for a in scenario.agents):
            if aid == ego_id:
                obs = sample_observation(scenario, aid, fi)
                feats.append(_encode_obs(obs, scenario.agent(aid).modality_tag,
                                         params, wfn, afn))
                continue
            src_frame = None
            for k in range(fi, -1, -1):
                if timestamps[k] + t_sys[(aid, k)] <= now:
                    src_frame = k
                    break
            if src_frame is None:
                continue
            obs = sample_observation(scenario, aid, src_frame)
            f = _encode_obs(obs, scenario.agent(aid).modality_tag, params,
                            wfn, afn)
            if transport == "codebook":
                wire = WireMessage.encode(aid, timestamps[src_frame],
                                          FeatureGrid(f), codebook, n_R)
                f = WireMessage.from_bytes(wire.to_bytes()).decode(
                    receiver_codebook or codebook).data
            elif transport == "compressed_fp32":
                f = compressor.round_trip(FeatureGrid(f)).data
            pose = scenario.agent(aid).pose
            if pose_noise != (0.0, 0.0):
                prng = root.split(2_000_003 * aid + src_frame + 7_919 * fi)
                pose = perturb_pose(pose, pose_noise[0], pose_noise[1], prng)
            feats.append(bilinear_warp(FeatureGrid(f), pose, ego_pose, mpc).data)
        outputs.append(DetectionGrid(_fuse_head(feats, params, wfn, afn)))
    return outputs, breakdown
