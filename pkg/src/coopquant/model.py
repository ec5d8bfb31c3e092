"""Toy cooperative-perception network: per-agent encoders, spatial warp,
softmax-weighted fusion, and a per-cell detection head.

The network is written directly in numpy with hand-derived gradients so the
whole stack stays dependency-light and bit-reproducible. Layers come in two
flavors: 3x3 stride-1 zero-pad-1 convolutions and per-cell linear maps; the
fusion stage weighs each agent's warped feature with a per-cell softmax over
learned 1x1 scores before a final convolution.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .grids import FeatureGrid, Pose2D, RngStream, bilinear_warp, bilinear_warp_backward
from .scene import Scenario, observe, detection_targets

__all__ = [
    "BlockSpec",
    "ModelParams",
    "DetectionGrid",
    "TrainConfig",
    "encode",
    "fuse",
    "head",
    "forward",
    "fit_fp",
    "eval_ap",
    "network_forward",
    "sample_observation",
]

MODALITIES = ("dense", "sparse")


# ---------------------------------------------------------------------------
# Primitive layer ops (forward + backward)
# ---------------------------------------------------------------------------


def conv3x3(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-1 zero-pad-1 convolution. x: (H,W,Cin), W: (Cout,Cin,3,3)."""
    h, w, ci = x.shape
    co = W.shape[0]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    # cols: (H, W, Cin, 3, 3) -> rows of (Cin*9)
    y = cols.reshape(h * w, ci * 9) @ W.reshape(co, ci * 9).T + b
    return y.reshape(h, w, co)


def conv3x3_backward(gy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns (gx, gW, gb) for conv3x3."""
    h, w, ci = x.shape
    co = W.shape[0]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    gy2 = gy.reshape(h * w, co)
    gW = (gy2.T @ cols.reshape(h * w, ci * 9)).reshape(W.shape)
    gb = gy2.sum(axis=0)
    # input gradient: correlate gy with the spatially flipped, transposed kernel
    Wt = W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy()
    gx = conv3x3(gy, Wt, np.zeros(ci))
    return gx, gW, gb


def linear_cell(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-cell linear map. x: (H,W,Cin), W: (Cout,Cin)."""
    return x @ W.T + b


def linear_cell_backward(gy: np.ndarray, x: np.ndarray, W: np.ndarray):
    h, w, ci = x.shape
    co = W.shape[0]
    gy2 = gy.reshape(-1, co)
    gW = gy2.T @ x.reshape(-1, ci)
    gb = gy2.sum(axis=0)
    gx = gy @ W
    return gx, gW, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(gy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return gy * (y > 0)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool; returns (y, argmax) for the backward pass."""
    h, w, c = x.shape
    hh, ww = h // 2, w // 2
    tiles = x[: 2 * hh, : 2 * ww].reshape(hh, 2, ww, 2, c).transpose(0, 2, 4, 1, 3).reshape(hh, ww, c, 4)
    arg = tiles.argmax(axis=3)
    y = np.take_along_axis(tiles, arg[..., None], axis=3)[..., 0]
    return y, arg


def maxpool2_backward(gy: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    h, w, c = in_shape
    hh, ww, _ = gy.shape
    gt = np.zeros((hh, ww, c, 4))
    np.put_along_axis(gt, arg[..., None], gy[..., None], axis=3)
    gx = np.zeros(in_shape)
    gx[: 2 * hh, : 2 * ww] = gt.reshape(hh, ww, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * hh, 2 * ww, c)
    return gx


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# Model definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockSpec:
    """One calibration unit: a weight-bearing layer plus its activation."""

    name: str
    kind: str  # conv3x3 | linear_per_cell
    in_channels: int
    out_channels: int
    tag: str  # encoder | fusion | head
    relu: bool
    modality: str | None = None  # encoder blocks only


@dataclass
class ModelParams:
    """All weight tensors of the cooperative model, keyed by dotted names."""

    channels: int = 16
    hidden: int = 8
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def blocks(self) -> list[BlockSpec]:
        specs = []
        for m in MODALITIES:
            specs.append(BlockSpec(f"enc.{m}.c1", "conv3x3", 1, self.hidden, "encoder", True, m))
            specs.append(BlockSpec(f"enc.{m}.c2", "conv3x3", self.hidden, self.channels, "encoder", True, m))
        specs.append(BlockSpec("fusion.score", "linear_per_cell", self.channels, 1, "fusion", False))
        specs.append(BlockSpec("fusion.conv", "conv3x3", self.channels, self.channels, "fusion", True))
        specs.append(BlockSpec("head", "linear_per_cell", self.channels, 3, "head", False))
        return specs

    def weight(self, name: str) -> np.ndarray:
        return self.tensors[f"{name}.W"]

    def bias(self, name: str) -> np.ndarray:
        return self.tensors[f"{name}.b"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.channels, self.hidden,
                           {k: v.copy() for k, v in self.tensors.items()})

    def check_finite(self):
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite values in tensor {k}")

    # -- container format: magic "QV2X", u16 version, tensor table, f32 data
    MAGIC = b"QV2X"
    VERSION = 1

    def save(self, path, meta: dict | None = None):
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<HHH", self.VERSION, self.channels, self.hidden))
            names = sorted(self.tensors)
            f.write(struct.pack("<I", len(names)))
            for name in names:
                t = self.tensors[name]
                nb = name.encode()
                f.write(struct.pack("<H", len(nb)))
                f.write(nb)
                f.write(struct.pack("<B", t.ndim))
                f.write(struct.pack(f"<{t.ndim}I", *t.shape))
                f.write(t.astype("<f4").tobytes())
            mb = json.dumps(meta or {}, sort_keys=True).encode()
            f.write(struct.pack("<I", len(mb)))
            f.write(mb)

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict]:
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != cls.MAGIC:
            raise ValueError("not a model container (bad magic)")
        version, channels, hidden = struct.unpack_from("<HHH", blob, 4)
        if version != cls.VERSION:
            raise ValueError(f"unsupported model container version {version}")
        off = 10
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", blob, off)
            off += 4 * nd
            cnt = int(np.prod(shape))
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=cnt,
                                          offset=off).reshape(shape).astype(np.float64)
            off += 4 * cnt
        (ml,) = struct.unpack_from("<I", blob, off)
        off += 4
        meta = json.loads(blob[off:off + ml].decode()) if ml else {}
        return cls(channels, hidden, tensors), meta


def init_params(seed: int, channels: int = 16, hidden: int = 8) -> ModelParams:
    """He-style random initialization, deterministic under seed."""
    rng = RngStream(seed)
    p = ModelParams(channels=channels, hidden=hidden)
    for spec in p.blocks():
        if spec.kind == "conv3x3":
            fan_in = spec.in_channels * 9
            shape = (spec.out_channels, spec.in_channels, 3, 3)
        else:
            fan_in = spec.in_channels
            shape = (spec.out_channels, spec.in_channels)
        std = math.sqrt(2.0 / fan_in)
        p.tensors[f"{spec.name}.W"] = rng.normal_array(shape, 0.0, std)
        p.tensors[f"{spec.name}.b"] = np.zeros(spec.out_channels)
    return p


@dataclass
class DetectionGrid:
    """Per-cell detections: (H, W, 3) = score logit, offset_x, offset_y."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"DetectionGrid data must be (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("DetectionGrid contains NaN/Inf")
        self.data = arr

    @property
    def score(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def offset_x(self) -> np.ndarray:
        return self.data[..., 1]

    @property
    def offset_y(self) -> np.ndarray:
        return self.data[..., 2]


# ---------------------------------------------------------------------------
# Forward pass (pluggable weight/activation transforms for calibration)
# ---------------------------------------------------------------------------


def _identity_w(name, W):
    return W


def _identity_a(name, x):
    return x


def _apply_block(spec: BlockSpec, x: np.ndarray, params: ModelParams,
                 weight_fn, act_fn, trace) -> np.ndarray:
    xin = x
    if trace is not None:
        trace.setdefault(spec.name, {"inputs": [], "outputs": []})["inputs"].append(xin)
    xq = act_fn(spec.name, xin)
    W = weight_fn(spec.name, params.weight(spec.name))
    b = params.bias(spec.name)
    if spec.kind == "conv3x3":
        y = conv3x3(xq, W, b)
    else:
        y = linear_cell(xq, W, b)
    if spec.relu:
        y = relu(y)
    if trace is not None:
        trace[spec.name]["outputs"].append(y)
    return y


def softmax_over_agents(scores: list[np.ndarray]) -> list[np.ndarray]:
    stack = np.stack(scores)  # (K, H, W)
    stack = stack - stack.max(axis=0, keepdims=True)
    e = np.exp(stack)
    w = e / e.sum(axis=0, keepdims=True)
    return [w[k] for k in range(len(scores))]


def network_forward(obs: dict[int, np.ndarray], modality: dict[int, str],
                    warp_poses: dict[int, tuple[Pose2D, Pose2D]], ego_id: int,
                    meters_per_cell: float, params: ModelParams,
                    weight_fn=_identity_w, act_fn=_identity_a,
                    trace: dict | None = None) -> np.ndarray:
    """Run encoders -> warp -> fusion -> head; returns the (H, W, 3) output.

    ``weight_fn(block_name, W)`` and ``act_fn(block_name, x)`` let callers
    inject fake quantization per block; ``trace`` (a dict) captures per-block
    inputs/outputs plus the warped features needed to resume mid-network.
    """
    specs = {s.name: s for s in params.blocks()}
    aids = sorted(obs)
    if ego_id not in aids:
        raise ValueError("ego agent must be present")

    feats = []
    for aid in aids:
        m = modality[aid]
        x = obs[aid]
        x = _apply_block(specs[f"enc.{m}.c1"], x, params, weight_fn, act_fn, trace)
        x = _apply_block(specs[f"enc.{m}.c2"], x, params, weight_fn, act_fn, trace)
        src, dst = warp_poses[aid]
        if src != dst:
            x = bilinear_warp(FeatureGrid(x), src, dst, meters_per_cell).data
        feats.append(x)

    scores = [
        _apply_block(specs["fusion.score"], f, params, weight_fn, act_fn, trace)[..., 0]
        for f in feats
    ]
    weights = softmax_over_agents(scores)
    fused_pre = sum(w[..., None] * f for w, f in zip(weights, feats))
    fused = _apply_block(specs["fusion.conv"], fused_pre, params, weight_fn, act_fn, trace)
    out = _apply_block(specs["head"], fused, params, weight_fn, act_fn, trace)
    if trace is not None:
        trace["_features"] = feats
        trace["_scores"] = scores
        trace["_final"] = out
    return out


def sample_observation(scenario: Scenario, agent_id: int, frame_idx: int) -> np.ndarray:
    """Deterministic observation for a (scenario, frame, agent) triple."""
    rng = RngStream(scenario.seed or 0).split(1_000_003 * frame_idx + agent_id)
    return observe(scenario, agent_id, frame_idx, rng).data


def _warp_pair(scenario: Scenario, aid: int, ego_id: int, pose_noise, rng) -> tuple[Pose2D, Pose2D]:
    from .scene import perturb_pose

    agent_pose = scenario.agent(aid).pose
    ego_pose = scenario.agent(ego_id).pose
    if aid == ego_id:
        return agent_pose, agent_pose  # self-feature needs no warp
    sigma_t, sigma_r = pose_noise
    if rng is not None and (sigma_t > 0 or sigma_r > 0):
        agent_pose = perturb_pose(agent_pose, sigma_t, sigma_r, rng)
    return agent_pose, ego_pose


def forward(scenario: Scenario, frame_idx: int, ego_id: int, params: ModelParams,
            present_agents: set[int] | None = None,
            pose_noise: tuple[float, float] = (0.0, 0.0),
            rng: RngStream | None = None,
            weight_fn=_identity_w, act_fn=_identity_a,
            trace: dict | None = None) -> DetectionGrid:
    """Full pipeline on one frame: observe, encode, warp into the ego frame,
    fuse, and decode detections."""
    if present_agents is None:
        present_agents = {a.id for a in scenario.agents}
    if ego_id not in present_agents:
        raise ValueError("ego must be in present_agents")
    obs = {aid: sample_observation(scenario, aid, frame_idx) for aid in present_agents}
    modality = {aid: scenario.agent(aid).modality_tag for aid in present_agents}
    warp_poses = {aid: _warp_pair(scenario, aid, ego_id, pose_noise, rng)
                  for aid in sorted(present_agents)}
    out = network_forward(obs, modality, warp_poses, ego_id, scenario.meters_per_cell,
                          params, weight_fn, act_fn, trace)
    return DetectionGrid(out)


# convenience wrappers matching the three pipeline stages


def encode(obs: FeatureGrid, params: ModelParams, modality_tag: str) -> FeatureGrid:
    if obs.channels != 1:
        raise ValueError(f"encoder expects 1 input channel, got {obs.channels}")
    x = relu(conv3x3(obs.data, params.weight(f"enc.{modality_tag}.c1"),
                     params.bias(f"enc.{modality_tag}.c1")))
    x = relu(conv3x3(x, params.weight(f"enc.{modality_tag}.c2"),
                     params.bias(f"enc.{modality_tag}.c2")))
    return FeatureGrid(x)


def fuse(features: list[FeatureGrid], params: ModelParams) -> FeatureGrid:
    if not features:
        raise ValueError("fuse needs at least one feature")
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ValueError(f"fuse requires identical shapes, got {shapes}")
    scores = [linear_cell(f.data, params.weight("fusion.score"),
                          params.bias("fusion.score"))[..., 0] for f in features]
    weights = softmax_over_agents(scores)
    fused_pre = sum(w[..., None] * f.data for w, f in zip(weights, features))
    y = relu(conv3x3(fused_pre, params.weight("fusion.conv"), params.bias("fusion.conv")))
    return FeatureGrid(y)


def head(h: FeatureGrid, params: ModelParams) -> DetectionGrid:
    return DetectionGrid(linear_cell(h.data, params.weight("head"), params.bias("head")))


# ---------------------------------------------------------------------------
# Training (hand-derived gradients, SGD with momentum)
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    batch: int = 4
    seed: int = 0
    momentum: float = 0.9
    channels: int = 16
    hidden: int = 8
    offset_weight: float = 1.0
    val_fraction: float = 0.1


def detection_loss(out: np.ndarray, targets: np.ndarray, offset_weight: float = 1.0):
    """Per-cell BCE on score + L2 on offsets at positive cells.

    Returns (loss, grad w.r.t. out)."""
    s = out[..., 0]
    occ = targets[..., 0]
    n = s.size
    loss = float(np.sum(softplus(s) - occ * s)) / n
    grad = np.zeros_like(out)
    grad[..., 0] = (sigmoid(s) - occ) / n

    npos = max(1.0, float(occ.sum()))
    for ch in (1, 2):
        diff = (out[..., ch] - targets[..., ch]) * occ
        loss += offset_weight * float(np.sum(diff * diff)) / npos
        grad[..., ch] = offset_weight * 2.0 * diff / npos
    return loss, grad


def loss_and_grad(params: ModelParams, scenario: Scenario, frame_idx: int, ego_id: int,
                  offset_weight: float = 1.0,
                  pose_noise: tuple[float, float] = (0.0, 0.0),
                  rng: RngStream | None = None):
    """Forward + full hand-derived backward for one training sample.

    Returns (loss, grads) where grads matches ``params.tensors`` keys."""
    present = sorted(a.id for a in scenario.agents)
    obs = {aid: sample_observation(scenario, aid, frame_idx) for aid in present}
    modality = {aid: scenario.agent(aid).modality_tag for aid in present}
    warp_poses = {aid: _warp_pair(scenario, aid, ego_id, pose_noise, rng) for aid in present}
    mpc = scenario.meters_per_cell
    targets = detection_targets(scenario, frame_idx, ego_id)

    # ---- forward with caches
    cache = {}
    feats = []
    for aid in present:
        m = modality[aid]
        x0 = obs[aid]
        pre1 = conv3x3(x0, params.weight(f"enc.{m}.c1"), params.bias(f"enc.{m}.c1"))
        a1 = relu(pre1)
        pre2 = conv3x3(a1, params.weight(f"enc.{m}.c2"), params.bias(f"enc.{m}.c2"))
        a2 = relu(pre2)
        src, dst = warp_poses[aid]
        fw = a2 if src == dst else bilinear_warp(FeatureGrid(a2), src, dst, mpc).data
        cache[aid] = (x0, a1, a2)
        feats.append(fw)

    u, bs = params.weight("fusion.score"), params.bias("fusion.score")
    scores = [linear_cell(f, u, bs)[..., 0] for f in feats]
    weights = softmax_over_agents(scores)
    fused_pre = sum(w[..., None] * f for w, f in zip(weights, feats))
    fpre_conv = conv3x3(fused_pre, params.weight("fusion.conv"), params.bias("fusion.conv"))
    fused = relu(fpre_conv)
    out = linear_cell(fused, params.weight("head"), params.bias("head"))

    loss, gout = detection_loss(out, targets, offset_weight)

    # ---- backward
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    gfused, gW, gb = linear_cell_backward(gout, fused, params.weight("head"))
    grads["head.W"] += gW
    grads["head.b"] += gb

    gfpre_conv = relu_backward(gfused, fused)
    gfused_pre, gW, gb = conv3x3_backward(gfpre_conv, fused_pre, params.weight("fusion.conv"))
    grads["fusion.conv.W"] += gW
    grads["fusion.conv.b"] += gb

    # fusion softmax: direct path + score path
    gfeats = [w[..., None] * gfused_pre for w in weights]
    gw_list = [np.sum(gfused_pre * f, axis=2) for f in feats]  # dL/dw_k, (H, W)
    wsum = sum(w * gw for w, gw in zip(weights, gw_list))
    gscores = [w * (gw - wsum) for w, gw in zip(weights, gw_list)]
    for k, f in enumerate(feats):
        gs3 = gscores[k][..., None]
        gf, gW, gb = linear_cell_backward(gs3, f, u)
        grads["fusion.score.W"] += gW
        grads["fusion.score.b"] += gb
        gfeats[k] = gfeats[k] + gf

    for k, aid in enumerate(present):
        m = modality[aid]
        x0, a1, a2 = cache[aid]
        src, dst = warp_poses[aid]
        gfw = gfeats[k]
        ga2 = gfw if src == dst else bilinear_warp_backward(gfw, src, dst, mpc)
        gpre2 = relu_backward(ga2, a2)
        ga1, gW, gb = conv3x3_backward(gpre2, a1, params.weight(f"enc.{m}.c2"))
        grads[f"enc.{m}.c2.W"] += gW
        grads[f"enc.{m}.c2.b"] += gb
        gpre1 = relu_backward(ga1, a1)
        _, gW, gb = conv3x3_backward(gpre1, x0, params.weight(f"enc.{m}.c1"))
        grads[f"enc.{m}.c1.W"] += gW
        grads[f"enc.{m}.c1.b"] += gb

    return loss, grads


def _dataset_loss(params: ModelParams, samples, scenarios, offset_weight: float) -> float:
    total = 0.0
    for si, fi, ego in samples:
        scn = scenarios[si]
        out = forward(scn, fi, ego, params)
        l, _ = detection_loss(out.data, detection_targets(scn, fi, ego), offset_weight)
        total += l
    return total / max(1, len(samples))


def fit_fp(scenarios: list[Scenario], config: TrainConfig) -> ModelParams:
    """Train the full-precision model with mini-batch SGD + momentum.

    Egos rotate over agents frame by frame; validation is the tail slice of
    scenarios (or the training set itself when there is only one scenario);
    the best-validation parameters are returned.
    """
    if not scenarios:
        raise ValueError("need at least one scenario")
    params = init_params(config.seed, config.channels, config.hidden)
    if config.epochs == 0:
        return params

    n_val = int(round(config.val_fraction * len(scenarios)))
    train_scn = list(range(len(scenarios) - n_val)) if n_val else list(range(len(scenarios)))
    val_scn = list(range(len(scenarios) - n_val, len(scenarios))) if n_val else train_scn

    def make_samples(indices):
        out = []
        for si in indices:
            n_agents = len(scenarios[si].agents)
            for fi in range(len(scenarios[si].frames)):
                out.append((si, fi, (si + fi) % n_agents))
        return out

    train_samples = make_samples(train_scn)
    val_samples = make_samples(val_scn)

    rng = RngStream(config.seed).split(0xF17)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    best = params.copy()
    best_val = _dataset_loss(params, val_samples, scenarios, config.offset_weight)

    for _ in range(config.epochs):
        order = list(train_samples)
        rng.shuffle(order)
        for start in range(0, len(order), config.batch):
            batch = order[start:start + config.batch]
            acc = {k: np.zeros_like(v) for k, v in params.tensors.items()}
            bloss = 0.0
            for si, fi, ego in batch:
                l, g = loss_and_grad(params, scenarios[si], fi, ego, config.offset_weight)
                bloss += l
                for k in acc:
                    acc[k] += g[k]
            if not math.isfinite(bloss):
                raise FloatingPointError(
                    f"training diverged (loss={bloss}) at batch starting {batch[0]}")
            inv = 1.0 / len(batch)
            for k in params.tensors:
                velocity[k] = config.momentum * velocity[k] - config.lr * inv * acc[k]
                params.tensors[k] += velocity[k]
        val = _dataset_loss(params, val_samples, scenarios, config.offset_weight)
        if val < best_val:
            best_val = val
            best = params.copy()
    best.check_finite()
    return best


# ---------------------------------------------------------------------------
# Detection-quality metric
# ---------------------------------------------------------------------------


def eval_ap(preds: list[DetectionGrid], labels: list[FeatureGrid],
            operating_points: list[float] = (0.3, 0.5)) -> float:
    """Cell-level average precision.

    Treats every cell as a binary classification with sigmoid(score)
    confidence, traces the precision-recall curve, and averages the
    interpolated precision at the given recall operating points. Returns 0
    when there are no positive cells.
    """
    if len(preds) != len(labels):
        raise ValueError("preds and labels must be matched lists")
    conf = np.concatenate([sigmoid(p.score).ravel() for p in preds])
    y = np.concatenate([l.data[..., 0].ravel() for l in labels]) > 0.5
    npos = int(y.sum())
    if npos == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    precision = tp / np.arange(1, len(y_sorted) + 1)
    recall = tp / npos
    # interpolated precision: running max from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    vals = []
    for t in operating_points:
        mask = recall >= t
        vals.append(float(interp[mask][0]) if mask.any() else 0.0)
    return float(np.mean(vals))
