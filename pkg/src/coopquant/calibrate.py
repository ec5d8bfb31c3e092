"""Block-wise post-training calibration of the cooperative model.

The engine walks the network block by block in topological order. For each
block it collects inputs produced by the already-quantized prefix, initializes
activation quantization parameters on those inputs, and then refines weight
and activation scales against the block reconstruction error (plus learnable
per-weight rounding). Fusion-tagged blocks score scale candidates with two
extra alignment terms: a KL divergence between full-precision and quantized
block outputs, and an L2 penalty on the final detection grid obtained by
pushing the quantized block output through the remaining full-precision
network.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .grids import FeatureGrid, RngStream, kl_divergence
from .model import (
    BlockSpec,
    DetectionGrid,
    ModelParams,
    conv3x3,
    conv3x3_backward,
    eval_ap,
    forward,
    linear_cell,
    linear_cell_backward,
    network_forward,
    relu,
    sample_observation,
    softmax_over_agents,
)
from .quantize import (
    QuantParams,
    RoundingVars,
    _candidate_scales,
    _zero_point_for,
    adaround_optimize,
    fake_quant,
    fake_quant_with_rounding,
    init_maxmin,
)
from .scene import Scenario, label_grid, perturb_pose

__all__ = [
    "CalibSample",
    "CalibConfig",
    "QuantizedModel",
    "build_calib_set",
    "collect_block_io",
    "hetero_loss",
    "spatial_loss",
    "calibrate",
    "naive_maxmin",
    "dataset_ap",
]

LATENCY_TAGS = ("sync", "stale_1_frame")


@dataclass(frozen=True)
class CalibSample:
    """One calibration forward: a frame, an agent subset, and noise draws."""

    scenario: Scenario
    frame_idx: int
    ego_id: int
    present_agents: frozenset
    pose_sigma_t: float
    pose_sigma_r: float
    latency_tag: str
    noise_seed: int

    def __post_init__(self):
        if self.ego_id not in self.present_agents:
            raise ValueError("ego must be one of the present agents")
        if not self.present_agents:
            raise ValueError("present_agents must be non-empty")
        if self.latency_tag not in LATENCY_TAGS:
            raise ValueError(f"unknown latency tag {self.latency_tag!r}")


@dataclass
class CalibConfig:
    fraction: float = 0.005
    steps: int = 1
    alpha: float = 0.5
    beta: float = 1.2
    t_grid: int = 100
    adaround_iters: int = 300
    adaround_lr: float = 0.05
    lambda_hetero: float = 1.0
    lambda_spatial: float = 0.1
    bits_weights: int = 8
    bits_acts: int = 8
    weight_granularity: str = "per_channel"
    pose_sigma_t: float = 0.2
    pose_sigma_r: float = 0.05
    seed: int = 0
    # ablation switches: with both disabled (and lambdas at 0) the result is
    # the plain max-min baseline
    enable_scale_search: bool = True
    enable_adaround: bool = True

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError("fraction must be in (0, 1]")
        if self.steps < 1 or self.t_grid < 1 or self.adaround_iters < 1:
            raise ValueError("all counts must be >= 1")
        if self.lambda_hetero < 0 or self.lambda_spatial < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class BlockQuant:
    """Quantization state of one block: weight + input-activation params."""

    weight_qp: QuantParams
    act_qp: QuantParams
    rounding: RoundingVars | None = None


@dataclass
class QuantizedModel:
    params: ModelParams
    blocks: dict[str, BlockQuant]
    bits_weights: int
    bits_acts: int

    def __post_init__(self):
        expected = {s.name for s in self.params.blocks()}
        if set(self.blocks) != expected:
            raise ValueError("every block needs exactly one quantization record")

    def weight_fn(self):
        def fn(name, W):
            if self.bits_weights >= 32:
                return W
            bq = self.blocks[name]
            if bq.rounding is not None:
                return fake_quant_with_rounding(W, bq.weight_qp, bq.rounding.up)
            return fake_quant(W, bq.weight_qp)

        return fn

    def act_fn(self):
        def fn(name, x):
            if self.bits_acts >= 32:
                return x
            return fake_quant(x, self.blocks[name].act_qp)

        return fn

    def forward(self, scenario, frame_idx, ego_id, **kwargs) -> DetectionGrid:
        return forward(scenario, frame_idx, ego_id, self.params,
                       weight_fn=self.weight_fn(), act_fn=self.act_fn(), **kwargs)

    # -- container: quantized-model magic, then the embedded base model blob,
    # then one record per block (weight QP, rounding mask, activation QP)
    MAGIC = b"QV2XQM"
    VERSION = 1

    def save(self, path):
        import io

        buf = io.BytesIO()

        def write_qp(qp: QuantParams):
            gran = 1 if qp.granularity == "per_channel" else 0
            scales = np.atleast_1d(qp.scale).astype("<f4")
            zps = np.atleast_1d(qp.zero_point).astype("<i4")
            buf.write(struct.pack("<BBI", gran, qp.bits, scales.size))
            buf.write(scales.tobytes())
            buf.write(zps.tobytes())

        # reuse the model container writer via a temporary file
        import tempfile, os

        with tempfile.NamedTemporaryFile(delete=False) as tf:
            tmp = tf.name
        try:
            self.params.save(tmp)
            with open(tmp, "rb") as f:
                model_blob = f.read()
        finally:
            os.unlink(tmp)

        buf.write(self.MAGIC)
        buf.write(struct.pack("<HBB", self.VERSION, self.bits_weights, self.bits_acts))
        buf.write(struct.pack("<I", len(model_blob)))
        buf.write(model_blob)
        names = sorted(self.blocks)
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            bq = self.blocks[name]
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            write_qp(bq.weight_qp)
            if bq.rounding is None:
                buf.write(struct.pack("<I", 0))
            else:
                up = bq.rounding.up.ravel()
                buf.write(struct.pack("<I", up.size))
                buf.write(np.packbits(up.astype(np.uint8), bitorder="little").tobytes())
            write_qp(bq.act_qp)
        with open(path, "wb") as f:
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "QuantizedModel":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[: len(cls.MAGIC)] != cls.MAGIC:
            raise ValueError("not a quantized-model container (bad magic)")
        off = len(cls.MAGIC)
        version, bits_w, bits_a = struct.unpack_from("<HBB", blob, off)
        off += 4
        if version != cls.VERSION:
            raise ValueError(f"unsupported quantized-model version {version}")
        (mlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        import tempfile, os

        with tempfile.NamedTemporaryFile(delete=False) as tf:
            tf.write(blob[off:off + mlen])
            tmp = tf.name
        try:
            params, _ = ModelParams.load(tmp)
        finally:
            os.unlink(tmp)
        off += mlen

        def read_qp():
            nonlocal off
            gran, bits, n = struct.unpack_from("<BBI", blob, off)
            off += 6
            scales = np.frombuffer(blob, "<f4", n, off).astype(np.float64)
            off += 4 * n
            zps = np.frombuffer(blob, "<i4", n, off).astype(np.int64)
            off += 4 * n
            g = "per_channel" if gran else "per_tensor"
            if n == 1 and g == "per_tensor":
                return QuantParams(scales[0], zps[0], bits, g)
            return QuantParams(scales, zps, bits, g)

        (nblocks,) = struct.unpack_from("<I", blob, off)
        off += 4
        blocks = {}
        shapes = {s.name: params.weight(s.name).shape for s in params.blocks()}
        for _ in range(nblocks):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + ln].decode()
            off += ln
            wqp = read_qp()
            (nmask,) = struct.unpack_from("<I", blob, off)
            off += 4
            rounding = None
            if nmask:
                nbytes = (nmask + 7) // 8
                bits_arr = np.unpackbits(
                    np.frombuffer(blob, np.uint8, nbytes, off), bitorder="little")[:nmask]
                off += nbytes
                # store as large +/- v so h reproduces the hard mask exactly
                v = np.where(bits_arr.reshape(shapes[name]) > 0, 50.0, -50.0)
                rounding = RoundingVars(v)
            aqp = read_qp()
            blocks[name] = BlockQuant(wqp, aqp, rounding)
        return cls(params, blocks, bits_w, bits_a)


# ---------------------------------------------------------------------------
# Calibration-set construction
# ---------------------------------------------------------------------------


def build_calib_set(scenarios: list[Scenario], cfg: CalibConfig,
                    rng: RngStream) -> list[CalibSample]:
    """Sample frames with random agent subsets, egos, pose noise, and latency
    patterns; deterministic under the rng state."""
    if not scenarios:
        raise ValueError("need at least one scenario")
    frames = [(scn, fi) for scn in scenarios for fi in range(len(scn.frames))]
    n = math.ceil(cfg.fraction * len(frames))
    order = list(range(len(frames)))
    rng.shuffle(order)
    samples = []
    for idx in order[:n]:
        scn, fi = frames[idx]
        aids = sorted(a.id for a in scn.agents)
        m = len(aids)
        # uniform over the 2^m - 1 non-empty subsets
        mask = rng.randint(2 ** m - 1) + 1
        subset = frozenset(aid for k, aid in enumerate(aids) if mask >> k & 1)
        members = sorted(subset)
        ego = members[rng.randint(len(members))]
        samples.append(CalibSample(
            scenario=scn,
            frame_idx=fi,
            ego_id=ego,
            present_agents=subset,
            pose_sigma_t=rng.uniform(0.0, cfg.pose_sigma_t),
            pose_sigma_r=rng.uniform(0.0, cfg.pose_sigma_r),
            latency_tag=LATENCY_TAGS[rng.randint(2)],
            noise_seed=rng.randint(2 ** 31),
        ))
    return samples


def _forward_sample(sample: CalibSample, params: ModelParams, weight_fn=None,
                    act_fn=None, trace=None) -> np.ndarray:
    """Run the network on one calibration sample (stale remote frames and
    perturbed remote poses included)."""
    from .model import _identity_w, _identity_a

    scn = sample.scenario
    rng = RngStream(sample.noise_seed)
    obs, modality, warp_poses = {}, {}, {}
    ego_pose = scn.agent(sample.ego_id).pose
    for aid in sorted(sample.present_agents):
        fi = sample.frame_idx
        if sample.latency_tag == "stale_1_frame" and aid != sample.ego_id:
            fi = max(0, sample.frame_idx - 1)
        obs[aid] = sample_observation(scn, aid, fi)
        modality[aid] = scn.agent(aid).modality_tag
        if aid == sample.ego_id:
            warp_poses[aid] = (ego_pose, ego_pose)
        else:
            noisy = perturb_pose(scn.agent(aid).pose, sample.pose_sigma_t,
                                 sample.pose_sigma_r, rng)
            warp_poses[aid] = (noisy, ego_pose)
    return network_forward(obs, modality, warp_poses, sample.ego_id,
                           scn.meters_per_cell, params,
                           weight_fn or _identity_w, act_fn or _identity_a, trace)


# ---------------------------------------------------------------------------
# Alignment losses
# ---------------------------------------------------------------------------


def hetero_loss(h_fp: FeatureGrid, h_int: FeatureGrid) -> float:
    """KL divergence between full-precision and quantized feature responses."""
    return kl_divergence(h_fp, h_int)


def spatial_loss(b_fp: DetectionGrid, b_int: DetectionGrid) -> float:
    """Squared-difference sum over the detection channels."""
    if b_fp.data.shape != b_int.data.shape:
        raise ValueError(f"shape mismatch: {b_fp.data.shape} vs {b_int.data.shape}")
    d = b_fp.data - b_int.data
    return float(np.sum(d * d))


# ---------------------------------------------------------------------------
# Block I/O collection
# ---------------------------------------------------------------------------


def _partial_weight_fn(blocks: dict, bits_w: int):
    def fn(name, W):
        bq = blocks.get(name)
        if bq is None or bits_w >= 32:
            return W
        if bq.rounding is not None:
            return fake_quant_with_rounding(W, bq.weight_qp, bq.rounding.up)
        return fake_quant(W, bq.weight_qp)

    return fn


def _partial_act_fn(blocks: dict, bits_a: int):
    def fn(name, x):
        bq = blocks.get(name)
        if bq is None or bits_a >= 32:
            return x
        return fake_quant(x, bq.act_qp)

    return fn


def collect_block_io(model: ModelParams, samples: list[CalibSample], block_idx: int,
                     upstream: str = "fp", calibrated: dict | None = None,
                     bits_weights: int = 8, bits_acts: int = 8):
    """Per-sample block inputs (from the fp or quantized pathway) and the
    matching full-precision outputs.

    Returns ``(inputs, fp_outputs)``: two parallel list-of-lists indexed by
    sample then by occurrence (encoder blocks run once per matching agent).
    """
    specs = model.blocks()
    spec = specs[block_idx]
    if upstream == "quantized":
        calibrated = calibrated or {}
        missing = [s.name for s in specs[:block_idx] if s.name not in calibrated]
        if missing:
            raise ValueError(f"upstream blocks not yet calibrated: {missing}")
        wfn = _partial_weight_fn(calibrated, bits_weights)
        afn = _partial_act_fn(calibrated, bits_acts)
    elif upstream == "fp":
        wfn = afn = None
    else:
        raise ValueError(f"upstream must be 'fp' or 'quantized', got {upstream!r}")

    inputs, fp_outputs = [], []
    for sample in samples:
        tr_fp = {}
        _forward_sample(sample, model, trace=tr_fp)
        if upstream == "fp":
            tr_in = tr_fp
        else:
            tr_in = {}
            _forward_sample(sample, model, wfn, afn, trace=tr_in)
        inputs.append(list(tr_in.get(spec.name, {"inputs": []})["inputs"]))
        fp_outputs.append(list(tr_fp.get(spec.name, {"outputs": []})["outputs"]))
    return inputs, fp_outputs


# ---------------------------------------------------------------------------
# Block apply operators (shared with the rounding optimizer)
# ---------------------------------------------------------------------------


class _BlockOp:
    """forward/weight_grad pair for one block, relu included."""

    def __init__(self, spec: BlockSpec, bias: np.ndarray):
        self.spec = spec
        self.bias = bias

    def forward(self, W, x):
        if self.spec.kind == "conv3x3":
            y = conv3x3(x, W, self.bias)
        else:
            y = linear_cell(x, W, self.bias)
        return relu(y) if self.spec.relu else y

    def weight_grad(self, W, x, gy):
        if self.spec.kind == "conv3x3":
            pre = conv3x3(x, W, self.bias)
            if self.spec.relu:
                gy = gy * (pre > 0)
            _, gW, _ = conv3x3_backward(gy, x, W)
        else:
            pre = linear_cell(x, W, self.bias)
            if self.spec.relu:
                gy = gy * (pre > 0)
            _, gW, _ = linear_cell_backward(gy, x, W)
        return gW


class _MultiInputOp:
    """Adapter feeding a list of block inputs as one stacked batch."""

    def __init__(self, op: _BlockOp):
        self.op = op

    def forward(self, W, xs):
        return [self.op.forward(W, x) for x in xs]


# ---------------------------------------------------------------------------
# The calibration loop
# ---------------------------------------------------------------------------


def _resume_fp(block_name: str, a_hats: list[np.ndarray], fp_trace: dict,
               params: ModelParams) -> np.ndarray:
    """Push a quantized fusion-block output through the remaining FP network
    and return the final detection grid."""
    if block_name == "fusion.score":
        feats = fp_trace["_features"]
        scores = [a[..., 0] for a in a_hats]
        weights = softmax_over_agents(scores)
        fused_pre = sum(w[..., None] * f for w, f in zip(weights, feats))
        fused = relu(conv3x3(fused_pre, params.weight("fusion.conv"),
                             params.bias("fusion.conv")))
        return linear_cell(fused, params.weight("head"), params.bias("head"))
    if block_name == "fusion.conv":
        (fused,) = a_hats
        return linear_cell(fused, params.weight("head"), params.bias("head"))
    raise ValueError(f"cannot resume mid-network from block {block_name!r}")


def _block_objective(spec: BlockSpec, op: _BlockOp, Wq: np.ndarray,
                     aqp: QuantParams, inputs, fp_outputs, fp_traces, fp_finals,
                     params: ModelParams, cfg: CalibConfig) -> float:
    """Reconstruction error, plus the two alignment terms on fusion blocks."""
    total = 0.0
    for s_idx, (xs, fps) in enumerate(zip(inputs, fp_outputs)):
        a_hats = []
        for x, fp in zip(xs, fps):
            a_hat = op.forward(Wq, fake_quant(x, aqp))
            d = a_hat - fp
            total += float(np.sum(d * d))
            if spec.tag == "fusion" and cfg.lambda_hetero > 0:
                total += cfg.lambda_hetero * hetero_loss(FeatureGrid(fp),
                                                         FeatureGrid(a_hat))
            a_hats.append(a_hat)
        if spec.tag == "fusion" and cfg.lambda_spatial > 0 and a_hats:
            o_partial = _resume_fp(spec.name, a_hats, fp_traces[s_idx], params)
            total += cfg.lambda_spatial * spatial_loss(
                DetectionGrid(fp_finals[s_idx]), DetectionGrid(o_partial))
    return total


def _refine_weight_scales(spec: BlockSpec, W: np.ndarray, wqp: QuantParams,
                          rounding: RoundingVars | None, op: _BlockOp,
                          q_inputs_flat, fp_flat, aqp: QuantParams,
                          cfg: CalibConfig) -> QuantParams:
    """Grid-search weight scales against the block reconstruction error.

    Per-channel groups are refined independently: output channel c of either
    layer kind depends only on W[c], so the Frobenius error decomposes."""
    xs_q = [fake_quant(x, aqp) for x in q_inputs_flat]

    def err_for(qp_full):
        if rounding is not None:
            Wq = fake_quant_with_rounding(W, qp_full, rounding.up)
        else:
            Wq = fake_quant(W, qp_full)
        return sum(float(np.sum((op.forward(Wq, x) - fp) ** 2))
                   for x, fp in zip(xs_q, fp_flat))

    if wqp.granularity == "per_tensor":
        best = (math.inf, wqp)
        for s in _candidate_scales(float(wqp.scale), cfg.alpha, cfg.beta, cfg.t_grid):
            z = _zero_point_for(np.asarray(s), W.min(), wqp.bits)
            cand = QuantParams(s, z, wqp.bits, "per_tensor")
            e = err_for(cand)
            if e < best[0]:
                best = (e, cand)
        return best[1]

    scales = wqp.scale.copy()
    zps = wqp.zero_point.copy()
    for c in range(W.shape[0]):
        best = (math.inf, scales[c], zps[c])
        for s in _candidate_scales(float(wqp.scale[c]), cfg.alpha, cfg.beta, cfg.t_grid):
            z = _zero_point_for(np.asarray(s), W[c].min(), wqp.bits)
            trial_s, trial_z = scales.copy(), zps.copy()
            trial_s[c], trial_z[c] = s, z
            e = err_for(QuantParams(trial_s, trial_z, wqp.bits, "per_channel"))
            if e < best[0]:
                best = (e, s, int(z))
        scales[c], zps[c] = best[1], best[2]
    return QuantParams(scales, zps, wqp.bits, "per_channel")


def _refine_act_scale(spec: BlockSpec, op: _BlockOp, Wq: np.ndarray,
                      aqp: QuantParams, inputs, fp_outputs, fp_traces,
                      fp_finals, params, cfg: CalibConfig) -> QuantParams:
    xmin = min(float(np.min(x)) for xs in inputs for x in xs)
    best = (math.inf, aqp)
    for s in _candidate_scales(float(aqp.scale), cfg.alpha, cfg.beta, cfg.t_grid):
        z = _zero_point_for(np.asarray(s), xmin, aqp.bits)
        cand = QuantParams(s, z, aqp.bits, "per_tensor")
        obj = _block_objective(spec, op, Wq, cand, inputs, fp_outputs,
                               fp_traces, fp_finals, params, cfg)
        if not math.isfinite(obj):
            raise FloatingPointError(
                f"non-finite calibration objective in block {spec.name}")
        if obj < best[0]:
            best = (obj, cand)
    return best[1]


def calibrate(fp_model: ModelParams, samples: list[CalibSample],
              cfg: CalibConfig) -> QuantizedModel:
    """Block-wise calibration: max-min weight init, then per block collect
    quantized-prefix inputs, init activation params, and refine scales and
    rounding directions against the block objective."""
    if not samples:
        raise ValueError("need at least one calibration sample")
    params = fp_model

    # full-precision reference pass: block outputs + final detections
    fp_traces, fp_finals = [], []
    for sample in samples:
        tr = {}
        out = _forward_sample(sample, params, trace=tr)
        fp_traces.append(tr)
        fp_finals.append(out)

    calibrated: dict[str, BlockQuant] = {}
    wfn = _partial_weight_fn(calibrated, cfg.bits_weights)
    afn = _partial_act_fn(calibrated, cfg.bits_acts)

    for spec in params.blocks():
        W = params.weight(spec.name)
        wqp = init_maxmin(W, cfg.bits_weights, cfg.weight_granularity)

        # inputs through the quantized prefix; encoder blocks of an absent
        # modality fall back to full-presence forwards on the same frames
        inputs = []
        fp_outputs = [list(tr.get(spec.name, {"outputs": []})["outputs"])
                      for tr in fp_traces]
        for sample in samples:
            tr = {}
            _forward_sample(sample, params, wfn, afn, trace=tr)
            inputs.append(list(tr.get(spec.name, {"inputs": []})["inputs"]))
        if not any(inputs):
            widened = [replace(s, present_agents=frozenset(
                a.id for a in s.scenario.agents), latency_tag="sync")
                for s in samples]
            inputs, fp_outputs = [], []
            for sample in widened:
                tr_fp, tr_q = {}, {}
                _forward_sample(sample, params, trace=tr_fp)
                _forward_sample(sample, params, wfn, afn, trace=tr_q)
                inputs.append(list(tr_q.get(spec.name, {"inputs": []})["inputs"]))
                fp_outputs.append(list(tr_fp.get(spec.name, {"outputs": []})["outputs"]))

        flat_in = [x for xs in inputs for x in xs]
        flat_fp = [y for ys in fp_outputs for y in ys]
        aqp = init_maxmin(np.concatenate([x.ravel() for x in flat_in]),
                          cfg.bits_acts, "per_tensor")
        op = _BlockOp(spec, params.bias(spec.name))
        rounding = None

        if cfg.bits_weights < 32 or cfg.bits_acts < 32:
            for _ in range(cfg.steps):
                if cfg.enable_scale_search:
                    wqp = _refine_weight_scales(spec, W, wqp, rounding, op,
                                                flat_in, flat_fp, aqp, cfg)
                    Wq = fake_quant(W, wqp)
                    aqp = _refine_act_scale(spec, op, Wq, aqp, inputs, fp_outputs,
                                            fp_traces, fp_finals, params, cfg)
                if cfg.enable_adaround:
                    xs_q = [fake_quant(x, aqp) for x in flat_in]
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        rounding = adaround_optimize(
                            W, wqp, xs_q, flat_fp, op,
                            iters=cfg.adaround_iters, lr=cfg.adaround_lr)
                if cfg.enable_scale_search and cfg.enable_adaround:
                    wqp = _refine_weight_scales(spec, W, wqp, rounding, op,
                                                flat_in, flat_fp, aqp, cfg)

        calibrated[spec.name] = BlockQuant(wqp, aqp, rounding)

    return QuantizedModel(params, calibrated, cfg.bits_weights, cfg.bits_acts)


def naive_maxmin(fp_model: ModelParams, samples: list[CalibSample],
                 cfg: CalibConfig) -> QuantizedModel:
    """Max-min baseline: same pipeline with all refinement disabled."""
    base = replace(cfg, enable_scale_search=False, enable_adaround=False,
                   lambda_hetero=0.0, lambda_spatial=0.0)
    return calibrate(fp_model, samples, base)


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------


def dataset_ap(scenarios: list[Scenario], params: ModelParams, weight_fn=None,
               act_fn=None, pose_noise=(0.0, 0.0), seed: int = 0) -> float:
    """Cell AP over every frame of every scenario with rotating egos."""
    from .model import _identity_w, _identity_a

    preds, labels = [], []
    for si, scn in enumerate(scenarios):
        for fi in range(len(scn.frames)):
            ego = (si + fi) % len(scn.agents)
            rng = RngStream(seed).split(10_007 * si + fi)
            out = forward(scn, fi, ego, params, pose_noise=pose_noise, rng=rng,
                          weight_fn=weight_fn or _identity_w,
                          act_fn=act_fn or _identity_a)
            preds.append(out)
            labels.append(label_grid(scn, fi, ego))
    return eval_ap(preds, labels)
