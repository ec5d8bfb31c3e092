"""Synthetic timed driving scenes and per-agent noisy observations.

Scenes are lists of axis-aligned square objects moving at constant velocity
inside a rectangular region of interest (ROI). Agents observe them as
occupancy grids in their own local frame, degraded by modality-dependent
dropout and Gaussian sensor noise, which gives the calibration stage the
heterogeneous activation statistics it has to cope with.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .grids import FeatureGrid, Pose2D, RngStream, _cell_centers

__all__ = [
    "SceneObject",
    "AgentConfig",
    "Scenario",
    "gen_scenario",
    "observe",
    "label_grid",
    "detection_targets",
    "perturb_pose",
]

# dense agents: light degradation; sparse agents: heavy dropout + noise
MODALITY_PROFILES = {
    "dense": {"sensor_noise_sigma": 0.02, "dropout_prob": 0.02},
    "sparse": {"sensor_noise_sigma": 0.08, "dropout_prob": 0.3},
}


@dataclass
class SceneObject:
    x: float
    y: float
    half_extent: float
    velocity_x: float = 0.0
    velocity_y: float = 0.0

    def __post_init__(self):
        if self.half_extent <= 0:
            raise ValueError("half_extent must be positive")


@dataclass
class AgentConfig:
    id: int
    pose: Pose2D
    fov_radius: float
    sensor_noise_sigma: float
    modality_tag: str  # "dense" | "sparse"
    dropout_prob: float

    def __post_init__(self):
        if self.fov_radius <= 0:
            raise ValueError("fov_radius must be positive")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must be in [0, 1]")
        if self.modality_tag not in MODALITY_PROFILES:
            raise ValueError(f"unknown modality_tag {self.modality_tag!r}")


@dataclass
class Scenario:
    roi: tuple[float, float, float]  # (width_m, height_m, meters_per_cell)
    agents: list[AgentConfig]
    frames: list[tuple[float, list[SceneObject]]]  # (timestamp_ms, objects)
    seed: int | None = None

    def __post_init__(self):
        ts = [t for t, _ in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frame timestamps must be strictly increasing")

    @property
    def meters_per_cell(self) -> float:
        return self.roi[2]

    @property
    def grid_shape(self) -> tuple[int, int]:
        w_m, h_m, mpc = self.roi
        return int(round(h_m / mpc)), int(round(w_m / mpc))

    def agent(self, agent_id: int) -> AgentConfig:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(f"no agent with id {agent_id}")

    # -- JSON round trip ----------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "roi": list(self.roi),
            "agents": [
                {
                    "id": a.id,
                    "pose": [a.pose.x, a.pose.y, a.pose.yaw],
                    "fov_radius": a.fov_radius,
                    "sensor_noise_sigma": a.sensor_noise_sigma,
                    "modality_tag": a.modality_tag,
                    "dropout_prob": a.dropout_prob,
                }
                for a in self.agents
            ],
            "frames": [
                {"timestamp_ms": t, "objects": [asdict(o) for o in objs]}
                for t, objs in self.frames
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        doc = json.loads(text)
        agents = [
            AgentConfig(
                id=a["id"],
                pose=Pose2D(*a["pose"]),
                fov_radius=a["fov_radius"],
                sensor_noise_sigma=a["sensor_noise_sigma"],
                modality_tag=a["modality_tag"],
                dropout_prob=a["dropout_prob"],
            )
            for a in doc["agents"]
        ]
        frames = [
            (f["timestamp_ms"], [SceneObject(**o) for o in f["objects"]])
            for f in doc["frames"]
        ]
        return cls(roi=tuple(doc["roi"]), agents=agents, frames=frames, seed=doc.get("seed"))


DEFAULT_ROI = (48.0, 48.0, 0.5)


def gen_scenario(seed: int, n_agents: int, n_objects: int, n_frames: int,
                 frame_dt_ms: float, roi: tuple[float, float, float] = DEFAULT_ROI,
                 fov_radius: float = 30.0) -> Scenario:
    """Deterministic scenario: constant-velocity objects, mixed-modality agents."""
    if n_agents < 1 or n_objects < 0 or n_frames < 1:
        raise ValueError("need n_agents >= 1, n_objects >= 0, n_frames >= 1")
    rng = RngStream(seed)
    w_m, h_m, _ = roi

    agents = []
    for i in range(n_agents):
        # keep agents inside the middle of the ROI so their FOVs overlap it
        px = rng.uniform(-0.35 * w_m, 0.35 * w_m)
        py = rng.uniform(-0.35 * h_m, 0.35 * h_m)
        yaw = rng.uniform(-math.pi, math.pi)
        tag = "dense" if i % 2 == 0 else "sparse"
        prof = MODALITY_PROFILES[tag]
        agents.append(AgentConfig(id=i, pose=Pose2D(px, py, yaw), fov_radius=fov_radius,
                                  modality_tag=tag, **prof))

    base_objects = []
    for _ in range(n_objects):
        he = rng.uniform(0.6, 1.5)
        ox = rng.uniform(-0.5 * w_m + he, 0.5 * w_m - he)
        oy = rng.uniform(-0.5 * h_m + he, 0.5 * h_m - he)
        vx = rng.uniform(-2.0, 2.0)
        vy = rng.uniform(-2.0, 2.0)
        base_objects.append(SceneObject(ox, oy, he, vx, vy))

    frames = []
    for k in range(n_frames):
        t = k * frame_dt_ms
        dt_s = t / 1000.0
        objs = [SceneObject(o.x + o.velocity_x * dt_s, o.y + o.velocity_y * dt_s,
                            o.half_extent, o.velocity_x, o.velocity_y)
                for o in base_objects]
        frames.append((float(t), objs))
    return Scenario(roi=roi, agents=agents, frames=frames, seed=seed)


def _occupancy(objects: list[SceneObject], wx: np.ndarray, wy: np.ndarray) -> np.ndarray:
    occ = np.zeros(wx.shape, dtype=bool)
    for o in objects:
        occ |= (np.abs(wx - o.x) <= o.half_extent) & (np.abs(wy - o.y) <= o.half_extent)
    return occ


def observe(scenario: Scenario, agent_id: int, frame_idx: int, rng: RngStream) -> FeatureGrid:
    """Occupancy-style observation grid in the agent's local frame.

    Cells whose centers fall inside an object and within ``fov_radius`` read 1,
    thinned by per-cell dropout; Gaussian noise is added across the FOV disk.
    Cells outside the FOV are exactly 0 regardless of the noise seed.
    """
    agent = scenario.agent(agent_id)
    _, objects = scenario.frames[frame_idx]
    h, w = scenario.grid_shape
    mpc = scenario.meters_per_cell

    lx, ly = _cell_centers(h, w, mpc)
    in_fov = np.hypot(lx, ly) <= agent.fov_radius
    wx, wy = agent.pose.to_world(lx, ly)
    occ = _occupancy(objects, wx, wy) & in_fov

    grid = occ.astype(np.float64)
    if agent.dropout_prob > 0:
        keep = rng.uniform_array((h, w)) >= agent.dropout_prob
        grid *= keep
    if agent.sensor_noise_sigma > 0:
        grid += agent.sensor_noise_sigma * rng.normal_array((h, w))
    grid *= in_fov
    return FeatureGrid(grid[..., None])


def label_grid(scenario: Scenario, frame_idx: int,
               ego_id: int | None = None) -> FeatureGrid:
    """Ground-truth occupancy: 1 inside any object footprint.

    With an ``ego_id`` the grid is expressed in that agent's local frame --
    the frame the pipeline's detections live in (remote features are warped
    into it, the ego's own feature is untouched). Without one the grid stays
    in the world/ROI frame.
    """
    _, objects = scenario.frames[frame_idx]
    h, w = scenario.grid_shape
    lx, ly = _cell_centers(h, w, scenario.meters_per_cell)
    if ego_id is not None:
        lx, ly = scenario.agent(ego_id).pose.to_world(lx, ly)
    occ = _occupancy(objects, lx, ly)
    return FeatureGrid(occ.astype(np.float64)[..., None])


def detection_targets(scenario: Scenario, frame_idx: int,
                      ego_id: int | None = None) -> np.ndarray:
    """Per-cell training targets, shape (H, W, 3): occupancy, dx, dy.

    Offsets are cell-relative fractions pointing from the cell center to the
    center of the nearest covering object; zero at unoccupied cells. As with
    ``label_grid``, passing an ``ego_id`` moves the target grid (and rotates
    the offset axes) into that agent's local frame.
    """
    _, objects = scenario.frames[frame_idx]
    h, w = scenario.grid_shape
    mpc = scenario.meters_per_cell
    lx, ly = _cell_centers(h, w, mpc)
    cos_y, sin_y = 1.0, 0.0
    if ego_id is not None:
        pose = scenario.agent(ego_id).pose
        lx, ly = pose.to_world(lx, ly)
        cos_y, sin_y = math.cos(pose.yaw), math.sin(pose.yaw)

    targets = np.zeros((h, w, 3))
    best = np.full((h, w), np.inf)
    for o in objects:
        inside = (np.abs(lx - o.x) <= o.half_extent) & (np.abs(ly - o.y) <= o.half_extent)
        d2 = (lx - o.x) ** 2 + (ly - o.y) ** 2
        take = inside & (d2 < best)
        best = np.where(take, d2, best)
        # world-frame delta rotated back into the grid's axes
        dwx, dwy = o.x - lx, o.y - ly
        dgx = cos_y * dwx + sin_y * dwy
        dgy = -sin_y * dwx + cos_y * dwy
        targets[..., 0] = np.where(inside, 1.0, targets[..., 0])
        targets[..., 1] = np.where(take, dgx / mpc, targets[..., 1])
        targets[..., 2] = np.where(take, dgy / mpc, targets[..., 2])
    return targets


def perturb_pose(pose: Pose2D, sigma_trans_m: float, sigma_rot_rad: float,
                 rng: RngStream) -> Pose2D:
    """Add independent Gaussian noise to x, y, yaw; yaw is re-wrapped."""
    if sigma_trans_m < 0 or sigma_rot_rad < 0:
        raise ValueError("noise sigmas must be >= 0")
    if sigma_trans_m == 0 and sigma_rot_rad == 0:
        return pose
    dx = rng.normal(0.0, sigma_trans_m) if sigma_trans_m > 0 else 0.0
    dy = rng.normal(0.0, sigma_trans_m) if sigma_trans_m > 0 else 0.0
    dyaw = rng.normal(0.0, sigma_rot_rad) if sigma_rot_rad > 0 else 0.0
    return Pose2D(pose.x + dx, pose.y + dy, pose.yaw + dyaw)
