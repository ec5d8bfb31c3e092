"""Shared feature codebook: greedy residual assignment, weighted multi-code
reconstruction, alternating-minimization pretraining, and joint fine-tuning
of the encoder and codes against the detection objective.

Messages carry only integer code indices; the per-rank combination weights
alpha live in the shared codebook and are never transmitted. alpha is kept
non-negative during fitting so adding ranks can only reduce the greedy
residual error.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .grids import FeatureGrid, RngStream, bilinear_warp, bilinear_warp_backward
from .model import (
    ModelParams,
    conv3x3,
    conv3x3_backward,
    detection_loss,
    linear_cell,
    linear_cell_backward,
    relu,
    relu_backward,
    sample_observation,
    softmax_over_agents,
)
from .scene import Scenario, detection_targets

__all__ = [
    "Codebook",
    "MessagePayload",
    "assign",
    "reconstruct",
    "train_stage1",
    "train_joint",
]


@dataclass
class Codebook:
    codes: np.ndarray  # (n_L, dim)
    alpha: np.ndarray  # (n_R,)
    final_loss: float | None = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if self.codes.ndim != 2 or self.codes.shape[0] < 2:
            raise ValueError("codebook needs at least 2 codes of shape (n_L, dim)")
        if not (np.all(np.isfinite(self.codes)) and np.all(np.isfinite(self.alpha))):
            raise ValueError("codebook contains NaN/Inf")

    @property
    def n_L(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @property
    def n_R(self) -> int:
        return self.alpha.shape[0]

    @property
    def version_hash(self) -> int:
        """64-bit content hash over the canonical (f32) codes and weights.

        Computed on the serialized precision so both ends of a link agree
        after a save/load round trip."""
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<IIB", self.n_L, self.dim, self.n_R))
        h.update(self.alpha.astype("<f4").tobytes())
        h.update(self.codes.astype("<f4").tobytes())
        return int.from_bytes(h.digest(), "little")

    def copy(self) -> "Codebook":
        return Codebook(self.codes.copy(), self.alpha.copy(), self.final_loss)

    MAGIC = b"QV2XCB"
    VERSION = 1

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<HIIB", self.VERSION, self.n_L, self.dim, self.n_R))
            f.write(self.alpha.astype("<f4").tobytes())
            f.write(self.codes.astype("<f4").tobytes())
            f.write(struct.pack("<Q", self.version_hash))

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:6] != cls.MAGIC:
            raise ValueError("not a codebook file (bad magic)")
        version, n_L, dim, n_R = struct.unpack_from("<HIIB", blob, 6)
        if version != cls.VERSION:
            raise ValueError(f"unsupported codebook version {version}")
        off = 6 + 11
        alpha = np.frombuffer(blob, "<f4", n_R, off).astype(np.float64)
        off += 4 * n_R
        codes = np.frombuffer(blob, "<f4", n_L * dim, off).astype(np.float64)
        off += 4 * n_L * dim
        (stored_hash,) = struct.unpack_from("<Q", blob, off)
        cb = cls(codes.reshape(n_L, dim), alpha)
        if cb.version_hash != stored_hash:
            raise ValueError("codebook content hash mismatch (corrupt file)")
        return cb


@dataclass
class MessagePayload:
    """Per-cell code indices: (H, W, n_R) integers in [0, n_L)."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 3:
            raise ValueError("indices must be (H, W, n_R)")
        if np.any(idx < 0):
            raise ValueError("negative code index")
        self.indices = idx

    @property
    def height(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    @property
    def n_R(self) -> int:
        return self.indices.shape[2]


def _assign_flat(vectors: np.ndarray, cb: Codebook, n_R: int) -> np.ndarray:
    """Greedy residual assignment on (N, C) vectors; returns (N, n_R) indices."""
    res = vectors.copy()
    out = np.empty((vectors.shape[0], n_R), dtype=np.int64)
    code_sq = np.sum(cb.codes * cb.codes, axis=1)
    if n_R > cb.n_R:
        raise ValueError(f"requested {n_R} ranks, codebook has {cb.n_R}")
    for r in range(n_R):
        a = cb.alpha[r]
        # ||res - a*d||^2 = ||res||^2 - 2a res.d + a^2 ||d||^2; first term is
        # constant per row so argmin ignores it (ties -> smallest index)
        dists = -2.0 * a * (res @ cb.codes.T) + (a * a) * code_sq
        idx = np.argmin(dists, axis=1)
        out[:, r] = idx
        res -= a * cb.codes[idx]
    return out


def assign(f: FeatureGrid, cb: Codebook, n_R: int = 1) -> MessagePayload:
    """Pick n_R codes per cell by greedy residual minimization."""
    if f.channels != cb.dim:
        raise ValueError(f"feature has {f.channels} channels, codebook dim {cb.dim}")
    h, w, c = f.shape
    idx = _assign_flat(f.data.reshape(-1, c), cb, n_R)
    return MessagePayload(idx.reshape(h, w, n_R))


def reconstruct(msg: MessagePayload, cb: Codebook) -> FeatureGrid:
    """F_hat[h, w] = sum_r alpha_r * d_{index_r}."""
    if np.any(msg.indices >= cb.n_L):
        raise ValueError("code index out of range for this codebook")
    if msg.n_R > cb.n_R:
        raise ValueError(f"message uses {msg.n_R} ranks, codebook has {cb.n_R}")
    picked = cb.codes[msg.indices]  # (H, W, n_R, C)
    return FeatureGrid(np.einsum("hwrc,r->hwc", picked, cb.alpha[: msg.n_R]))


# ---------------------------------------------------------------------------
# Stage-1 training: alternating assignment / least-squares code update
# ---------------------------------------------------------------------------


def _stage1_loss(vectors: np.ndarray, cb: Codebook, idx: np.ndarray) -> float:
    recon = np.einsum("nrc,r->nc", cb.codes[idx], cb.alpha[: idx.shape[1]])
    d = vectors - recon
    return float(np.sum(d * d))


def train_stage1(features: list[FeatureGrid], n_L: int, n_R: int = 1,
                 iters: int = 20, seed: int = 0) -> Codebook:
    """Fit codes (and alpha for n_R > 1) by alternating minimization.

    Assignment uses the greedy residual rule; the code update solves the
    normal equations of the linear reconstruction given fixed assignments.
    Codes left unassigned for a full sweep are reseeded from random training
    vectors. alpha is projected to be non-negative."""
    if n_L < 2:
        raise ValueError("n_L must be >= 2")
    vectors = np.concatenate([f.data.reshape(-1, f.channels) for f in features])
    n, dim = vectors.shape
    if n < n_L:
        raise ValueError(f"need at least n_L={n_L} feature vectors, got {n}")
    rng = RngStream(seed)

    pick = list(range(n))
    rng.shuffle(pick)
    codes = vectors[pick[:n_L]].copy()
    alpha = np.ones(n_R)
    if n_R > 1:
        # later ranks start small: they fit residuals
        alpha = 1.0 / (2.0 ** np.arange(n_R))
    cb = Codebook(codes, alpha)

    loss = math.inf
    for _ in range(iters):
        idx = _assign_flat(vectors, cb, n_R)

        # normal equations: (A^T A) D = A^T F with A[p, l] = sum_r alpha_r
        # [idx_{p,r} = l]
        ata = np.zeros((n_L, n_L))
        atf = np.zeros((n_L, dim))
        for r in range(n_R):
            atf_r = np.zeros((n_L, dim))
            np.add.at(atf_r, idx[:, r], vectors)
            atf += cb.alpha[r] * atf_r
            for s in range(n_R):
                np.add.at(ata, (idx[:, r], idx[:, s]), cb.alpha[r] * cb.alpha[s])
        used = np.zeros(n_L, dtype=bool)
        used[np.unique(idx)] = True
        new_codes = cb.codes.copy()
        if used.any():
            sub = np.ix_(used, used)
            sol, *_ = np.linalg.lstsq(ata[sub], atf[used], rcond=None)
            new_codes[used] = sol
        cb.codes = new_codes

        if n_R > 1:
            # alpha update given codes and assignments, projected >= 0
            g = cb.codes[idx]  # (n, n_R, dim)
            gm = g.reshape(n, n_R, dim)
            gram = np.einsum("nrc,nsc->rs", gm, gm)
            rhs = np.einsum("nrc,nc->r", gm, vectors)
            try:
                a_new = np.linalg.solve(gram, rhs)
            except np.linalg.LinAlgError:
                a_new, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
            cb.alpha = np.maximum(a_new, 0.0)

        # reseed dead codes from random vectors with a little jitter
        dead = np.flatnonzero(~used)
        for l in dead:
            v = vectors[rng.randint(n)]
            cb.codes[l] = v + 1e-6 * rng.normal_array(dim)

        loss = _stage1_loss(vectors, cb, _assign_flat(vectors, cb, n_R))

    # dedup: identical codes carry no extra capacity; nudge duplicates
    for l in range(1, n_L):
        while np.any(np.all(cb.codes[:l] == cb.codes[l], axis=1)):
            cb.codes[l] = cb.codes[l] + 1e-9 * (1.0 + rng.normal_array(dim))

    cb.final_loss = _stage1_loss(vectors, cb, _assign_flat(vectors, cb, n_R))
    return cb


# ---------------------------------------------------------------------------
# Stage-2 joint fine-tuning (straight-through estimator)
# ---------------------------------------------------------------------------


def joint_loss_and_grad(params: ModelParams, cb: Codebook, scenario: Scenario,
                        frame_idx: int, ego_id: int, lambda_rec: float, n_R: int,
                        frozen: dict | None = None, frozen_mode: str = "ste"):
    """Detection loss on codebook-reconstructed remote features plus the
    reconstruction penalty; analytic gradients for weights, codes, and alpha.

    The discrete assignment uses the straight-through convention: the
    detection-path gradient passes unchanged from the reconstructed feature
    to the encoder output. ``frozen`` (a previous return value) replaces the
    recomputed assignment with a fixed one, which makes the objective an
    ordinary differentiable function suitable for finite-difference checks:

    - mode "ste": the reconstructed feature is held at F + offset0 with the
      offset frozen, so the straight-through weight gradient is the exact
      gradient of this surrogate;
    - mode "lookup": the reconstruction is recomputed from frozen indices and
      the current codes, exposing the exact code/alpha gradients.
    """
    present = sorted(a.id for a in scenario.agents)
    mpc = scenario.meters_per_cell
    targets = detection_targets(scenario, frame_idx, ego_id)
    ego_pose = scenario.agent(ego_id).pose
    if frozen is not None and frozen_mode not in ("ste", "lookup"):
        raise ValueError(f"unknown frozen mode {frozen_mode!r}")
    ste_to_encoder = frozen is None or frozen_mode == "ste"
    codes_live = frozen is None or frozen_mode == "lookup"

    cache = {}
    feats = []
    rec_loss = 0.0
    state = {"assignments": {}, "fhat0": {}, "f0": {}}
    for aid in present:
        m = scenario.agent(aid).modality_tag
        x0 = sample_observation(scenario, aid, frame_idx)
        pre1 = conv3x3(x0, params.weight(f"enc.{m}.c1"), params.bias(f"enc.{m}.c1"))
        a1 = relu(pre1)
        pre2 = conv3x3(a1, params.weight(f"enc.{m}.c2"), params.bias(f"enc.{m}.c2"))
        F = relu(pre2)
        if aid == ego_id:
            fhat_det = fhat_rec = F
            idx = None
        elif frozen is None:
            msg = assign(FeatureGrid(F), cb, n_R)
            idx = msg.indices
            fhat_det = fhat_rec = reconstruct(msg, cb).data
        elif frozen_mode == "ste":
            idx = frozen["assignments"][aid]
            offset = frozen["fhat0"][aid] - frozen["f0"][aid]
            fhat_det = F + offset
            fhat_rec = frozen["fhat0"][aid]
        else:  # lookup
            idx = frozen["assignments"][aid]
            fhat_det = fhat_rec = reconstruct(
                MessagePayload(idx), cb).data
        if aid != ego_id:
            state["assignments"][aid] = idx
            state["fhat0"][aid] = fhat_rec
            state["f0"][aid] = F
            d = F - fhat_rec
            rec_loss += float(np.sum(d * d))
        src = scenario.agent(aid).pose
        fw = fhat_det if aid == ego_id else bilinear_warp(
            FeatureGrid(fhat_det), src, ego_pose, mpc).data
        cache[aid] = (x0, a1, F, fhat_rec)
        feats.append(fw)

    u, bs = params.weight("fusion.score"), params.bias("fusion.score")
    scores = [linear_cell(f, u, bs)[..., 0] for f in feats]
    weights = softmax_over_agents(scores)
    fused_pre = sum(w[..., None] * f for w, f in zip(weights, feats))
    fpre = conv3x3(fused_pre, params.weight("fusion.conv"), params.bias("fusion.conv"))
    fused = relu(fpre)
    out = linear_cell(fused, params.weight("head"), params.bias("head"))

    det_loss, gout = detection_loss(out, targets)
    loss = det_loss + lambda_rec * rec_loss

    # ---- backward
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    gcodes = np.zeros_like(cb.codes)
    galpha = np.zeros_like(cb.alpha)

    gfused, gW, gb = linear_cell_backward(gout, fused, params.weight("head"))
    grads["head.W"] += gW
    grads["head.b"] += gb
    gfpre = relu_backward(gfused, fused)
    gfused_pre, gW, gb = conv3x3_backward(gfpre, fused_pre, params.weight("fusion.conv"))
    grads["fusion.conv.W"] += gW
    grads["fusion.conv.b"] += gb

    gfeats = [w[..., None] * gfused_pre for w in weights]
    gw_list = [np.sum(gfused_pre * f, axis=2) for f in feats]
    wsum = sum(w * gw for w, gw in zip(weights, gw_list))
    gscores = [w * (gw - wsum) for w, gw in zip(weights, gw_list)]
    for k, f in enumerate(feats):
        gf, gW, gb = linear_cell_backward(gscores[k][..., None], f, u)
        grads["fusion.score.W"] += gW
        grads["fusion.score.b"] += gb
        gfeats[k] = gfeats[k] + gf

    for k, aid in enumerate(present):
        m = scenario.agent(aid).modality_tag
        x0, a1, F, fhat_rec = cache[aid]
        src = scenario.agent(aid).pose
        gfw = gfeats[k]
        if aid == ego_id:
            gF = gfw
        else:
            gfhat = bilinear_warp_backward(gfw, src, ego_pose, mpc)
            if codes_live:
                # codes / alpha get the detection-path and the
                # reconstruction-path gradients through the code lookup
                idx = state["assignments"][aid]
                gtotal_fhat = gfhat - lambda_rec * 2.0 * (F - fhat_rec)
                for r in range(n_R):
                    np.add.at(gcodes, idx[..., r].ravel(),
                              cb.alpha[r] * gtotal_fhat.reshape(-1, cb.dim))
                    galpha[r] += float(np.sum(gtotal_fhat *
                                              cb.codes[idx[..., r]]))
            # reconstruction pull toward the codes, plus the straight-through
            # detection gradient when the assignment tracks the encoder
            gF = lambda_rec * 2.0 * (F - fhat_rec)
            if ste_to_encoder:
                gF = gF + gfhat
        gpre2 = relu_backward(gF, F)
        ga1, gW, gb = conv3x3_backward(gpre2, a1, params.weight(f"enc.{m}.c2"))
        grads[f"enc.{m}.c2.W"] += gW
        grads[f"enc.{m}.c2.b"] += gb
        gpre1 = relu_backward(ga1, a1)
        _, gW, gb = conv3x3_backward(gpre1, x0, params.weight(f"enc.{m}.c1"))
        grads[f"enc.{m}.c1.W"] += gW
        grads[f"enc.{m}.c1.b"] += gb

    return loss, grads, gcodes, galpha, state


def train_joint(model: ModelParams, cb: Codebook, scenarios: list[Scenario],
                lambda_rec: float = 1.0, iters: int = 10, lr: float = 0.01,
                seed: int = 0, n_R: int | None = None):
    """Fine-tune the encoder-side model and codebook together.

    ``iters`` counts epochs over every (scenario, frame) pair with rotating
    egos; plain SGD. Returns the fine-tuned (model, codebook) pair."""
    if n_R is None:
        n_R = cb.n_R
    params = model.copy()
    cb = cb.copy()
    if iters == 0:
        return params, cb
    samples = [(si, fi, (si + fi) % len(scn.agents))
               for si, scn in enumerate(scenarios)
               for fi in range(len(scn.frames))]
    rng = RngStream(seed)
    for _ in range(iters):
        order = list(samples)
        rng.shuffle(order)
        for si, fi, ego in order:
            loss, grads, gcodes, galpha, _ = joint_loss_and_grad(
                params, cb, scenarios[si], fi, ego, lambda_rec, n_R)
            if not math.isfinite(loss):
                raise FloatingPointError(f"joint training loss became {loss}")
            for k in params.tensors:
                params.tensors[k] -= lr * grads[k]
            cb.codes -= lr * gcodes
            cb.alpha = np.maximum(cb.alpha - lr * galpha, 0.0)
    params.check_finite()
    return params, cb


def joint_dataset_loss(params: ModelParams, cb: Codebook,
                       scenarios: list[Scenario], lambda_rec: float,
                       n_R: int) -> float:
    """Mean joint objective over every frame with rotating egos."""
    total, count = 0.0, 0
    for si, scn in enumerate(scenarios):
        for fi in range(len(scn.frames)):
            ego = (si + fi) % len(scn.agents)
            loss, *_ = joint_loss_and_grad(params, cb, scn, fi, ego,
                                           lambda_rec, n_R)
            total += loss
            count += 1
    return total / max(1, count)
