"""Synthetic quadcopter, camera rig, and lag-dominated perception channel.

The perception error model mirrors an unsynchronized camera/localization
pair: the perceived pad position is computed from the pose the vehicle had
buffer_size frames ago, plus isotropic Gaussian noise. The vehicle itself is
a first-order waypoint tracker with a small-angle tilt model; the contract
under study concerns the perception channel, not flight dynamics.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import jsonio
from .contract import FEATURE_DESCRIPTOR, Sample
from .geometry import Box3

FRAME_DT = 1.0 / 60.0   # camera-locked step, 60 frames per second
K_P = 1.0               # waypoint-tracking gain, 1/s
V_MAX = 1.5             # speed clip, m/s
TILT_GAIN = 0.015       # commanded tilt per unit horizontal acceleration, rad/(m/s^2)
TILT_MAX = 0.2          # rad
ATT_RATE = 2.0          # first-order attitude response rate, 1/s


class WarmupError(RuntimeError):
    """Perception was queried before the pose history covered the lag buffer."""


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx_matrix(phi) -> np.ndarray:
    """Body-to-world rotation for Z-Y-X (yaw-pitch-roll) Euler angles."""
    phi = np.asarray(phi, dtype=float)
    return rot_z(phi[2]) @ rot_y(phi[1]) @ rot_x(phi[0])


@dataclass
class QuadState:
    p: np.ndarray      # position, m (world)
    v: np.ndarray      # velocity, m/s (world)
    phi: np.ndarray    # attitude, Z-Y-X Euler, rad
    omega: np.ndarray  # angular velocity, rad/s

    def __post_init__(self):
        for name in ("p", "v", "phi", "omega"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (3,) or not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} must be a finite 3-vector")
            setattr(self, name, vec)
        if abs(self.phi[0]) >= math.pi / 2 or abs(self.phi[1]) >= math.pi / 2:
            raise ValueError("no inverted flight: |roll|, |pitch| must stay below pi/2")

    def copy(self) -> "QuadState":
        return QuadState(self.p.copy(), self.v.copy(), self.phi.copy(), self.omega.copy())


@dataclass(frozen=True)
class Pose:
    """Time-stamped pose snapshot kept in the perception lag buffer."""

    time: float
    p: np.ndarray
    phi: np.ndarray


@dataclass(frozen=True)
class CameraRig:
    rotation: np.ndarray     # camera axes expressed in the quad frame
    translation: np.ndarray  # camera origin in the quad frame, m
    frame_dt: float = FRAME_DT

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float)
        translation = np.asarray(self.translation, dtype=float)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValueError("rig needs a 3x3 rotation and a 3-vector translation")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-9:
            raise ValueError("rig rotation must be orthonormal within 1e-9")
        if self.frame_dt <= 0:
            raise ValueError("frame_dt must be positive")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)


def default_rig() -> CameraRig:
    """Forward camera tilted 30 degrees down, 5 cm ahead of the body origin."""
    return CameraRig(rot_y(math.radians(30.0)), np.array([0.05, 0.0, 0.0]))


@dataclass
class PerceptionChannel:
    buffer_size: int
    noise_sigma: float
    pose_history: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        self.pose_history = deque(self.pose_history, maxlen=self.buffer_size)


@dataclass
class PathConfig:
    """Flight plan for data collection: a fast Lissajous sweep (diverse
    positions and velocities) followed by slow ramped visits with hover
    dwells near the pad (the regime the landing loop operates in)."""

    amp: tuple[float, float] = (2.4, 2.4)
    omega: tuple[float, float] = (0.50, 0.36)
    phase: tuple[float, float] = (0.0, 0.9)
    z_mid: float = 1.5
    z_amp: float = 0.9
    z_omega: float = 0.28
    z_phase: float = 0.5
    visit_fraction: float = 0.4   # tail share of the flight spent near the pad
    visit_speed: float = 0.5      # waypoint ramp speed between visits, m/s
    visit_radius: tuple[float, float] = (0.02, 0.7)    # lateral offset range, m
    visit_altitude: tuple[float, float] = (0.05, 1.0)  # m
    dwell_time: tuple[float, float] = (1.0, 2.0)       # hover hold per visit, s

    def to_dict(self) -> dict:
        return {
            "amp": list(self.amp),
            "omega": list(self.omega),
            "phase": list(self.phase),
            "z_mid": self.z_mid,
            "z_amp": self.z_amp,
            "z_omega": self.z_omega,
            "z_phase": self.z_phase,
            "visit_fraction": self.visit_fraction,
            "visit_speed": self.visit_speed,
            "visit_radius": list(self.visit_radius),
            "visit_altitude": list(self.visit_altitude),
            "dwell_time": list(self.dwell_time),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PathConfig":
        base = cls()
        return cls(
            amp=tuple(doc.get("amp", base.amp)),
            omega=tuple(doc.get("omega", base.omega)),
            phase=tuple(doc.get("phase", base.phase)),
            z_mid=float(doc.get("z_mid", base.z_mid)),
            z_amp=float(doc.get("z_amp", base.z_amp)),
            z_omega=float(doc.get("z_omega", base.z_omega)),
            z_phase=float(doc.get("z_phase", base.z_phase)),
            visit_fraction=float(doc.get("visit_fraction", base.visit_fraction)),
            visit_speed=float(doc.get("visit_speed", base.visit_speed)),
            visit_radius=tuple(doc.get("visit_radius", base.visit_radius)),
            visit_altitude=tuple(doc.get("visit_altitude", base.visit_altitude)),
            dwell_time=tuple(doc.get("dwell_time", base.dwell_time)),
        )


def path_point(path: PathConfig, t: float) -> np.ndarray:
    return np.array(
        [
            path.amp[0] * math.sin(path.omega[0] * t + path.phase[0]),
            path.amp[1] * math.sin(path.omega[1] * t + path.phase[1]),
            path.z_mid + path.z_amp * math.sin(path.z_omega * t + path.z_phase),
        ]
    )


def default_workspace() -> Box3:
    """6 m x 6 m x 3 m flight volume centered on the origin at ground level."""
    return Box3(np.array([-3.0, -3.0, 0.0]), np.array([3.0, 3.0, 3.0]))


@dataclass
class SimConfig:
    n_samples: int = 5000
    seed: int = 0
    buffer_size: int = 1
    noise_sigma: float = 0.005
    pad: tuple[float, float, float] = (0.8, -0.6, 0.0)
    pads: list[tuple[float, float, float]] | None = None  # optional multi-pad sweep
    rig: CameraRig = field(default_factory=default_rig)
    workspace: Box3 = field(default_factory=default_workspace)
    path: PathConfig = field(default_factory=PathConfig)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "seed": self.seed,
            "buffer_size": self.buffer_size,
            "noise_sigma": self.noise_sigma,
            "pad": list(self.pad),
            "pads": [list(p) for p in self.pads] if self.pads else None,
            "rig": {
                "rotation": self.rig.rotation.tolist(),
                "translation": self.rig.translation.tolist(),
                "frame_dt": self.rig.frame_dt,
            },
            "workspace": {"lo": self.workspace.lo.tolist(), "hi": self.workspace.hi.tolist()},
            "path": self.path.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        base = cls()
        try:
            n_samples = int(doc.get("n_samples", base.n_samples))
            if n_samples < 1:
                raise ValueError("n_samples: must be >= 1")
            seed = int(doc.get("seed", base.seed))
            buffer_size = int(doc.get("buffer_size", base.buffer_size))
            if buffer_size < 1:
                raise ValueError("buffer_size: must be >= 1")
            noise_sigma = float(doc.get("noise_sigma", base.noise_sigma))
            if noise_sigma < 0:
                raise ValueError("noise_sigma: must be nonnegative")
            pad = tuple(float(x) for x in doc.get("pad", base.pad))
            if len(pad) != 3:
                raise ValueError("pad: must be a 3-vector")
            if pad[2] != 0.0:
                raise ValueError("pad: must sit on the ground plane (z = 0)")
            pads_doc = doc.get("pads")
            pads = None
            if pads_doc:
                pads = [tuple(float(x) for x in p) for p in pads_doc]
                for p in pads:
                    if len(p) != 3 or p[2] != 0.0:
                        raise ValueError("pads: every pad must be a 3-vector with z = 0")
            if "rig" in doc:
                rig_doc = doc["rig"]
                rig = CameraRig(
                    np.asarray(rig_doc["rotation"], dtype=float),
                    np.asarray(rig_doc["translation"], dtype=float),
                    float(rig_doc.get("frame_dt", FRAME_DT)),
                )
            else:
                rig = base.rig
            if "workspace" in doc:
                ws_doc = doc["workspace"]
                workspace = Box3(
                    np.asarray(ws_doc["lo"], dtype=float), np.asarray(ws_doc["hi"], dtype=float)
                )
            else:
                workspace = base.workspace
            path = PathConfig.from_dict(doc.get("path", {}))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed simulation config: {exc}") from exc
        return cls(
            n_samples=n_samples,
            seed=seed,
            buffer_size=buffer_size,
            noise_sigma=noise_sigma,
            pad=pad,
            pads=pads,
            rig=rig,
            workspace=workspace,
            path=path,
        )


@dataclass
class SimWorld:
    quad: QuadState
    pad_world: np.ndarray
    rig: CameraRig
    channel: PerceptionChannel
    workspace: Box3
    clock: float
    rng: np.random.Generator

    def __post_init__(self):
        self.pad_world = np.asarray(self.pad_world, dtype=float)
        if self.pad_world.shape != (3,) or self.pad_world[2] != 0.0:
            raise ValueError("pad must be a 3-vector on the ground plane")
        if not (
            np.all(self.quad.p >= self.workspace.lo) and np.all(self.quad.p <= self.workspace.hi)
        ):
            raise ValueError("quad must start inside the workspace")


def make_world(cfg: SimConfig, start_p, seed: int | None = None) -> SimWorld:
    """Fresh world with the quad hovering at start_p and an empty lag buffer."""
    quad = QuadState(np.asarray(start_p, dtype=float), np.zeros(3), np.zeros(3), np.zeros(3))
    channel = PerceptionChannel(cfg.buffer_size, cfg.noise_sigma)
    return SimWorld(
        quad=quad,
        pad_world=np.asarray(cfg.pad, dtype=float),
        rig=cfg.rig,
        channel=channel,
        workspace=cfg.workspace,
        clock=0.0,
        rng=np.random.default_rng(cfg.seed if seed is None else seed),
    )


def camera_axes(rig: CameraRig, pose) -> tuple[np.ndarray, np.ndarray]:
    """Camera-to-world rotation and camera origin for a pose with .p and .phi."""
    body_to_world = euler_zyx_matrix(pose.phi)
    rotation = body_to_world @ rig.rotation
    origin = pose.p + body_to_world @ rig.translation
    return rotation, origin


def world_to_camera(rig: CameraRig, pose, point_w) -> np.ndarray:
    """Express a world point in the camera frame for the given vehicle pose."""
    rotation, origin = camera_axes(rig, pose)
    return rotation.T @ (np.asarray(point_w, dtype=float) - origin)


def camera_to_world(rig: CameraRig, pose, point_c) -> np.ndarray:
    """Inverse of world_to_camera; the round trip is identity to ~1e-12."""
    rotation, origin = camera_axes(rig, pose)
    return rotation @ np.asarray(point_c, dtype=float) + origin


def perceive(world: SimWorld) -> tuple[np.ndarray, Pose]:
    """Perceived pad position in the camera frame, plus the stale pose used.

    The perceived value is computed from the pose buffer_size frames ago and
    perturbed with isotropic Gaussian noise; the discrepancy against the
    current pose is the injected perception error.
    """
    channel = world.channel
    if len(channel.pose_history) < channel.buffer_size:
        raise WarmupError(
            f"lag buffer holds {len(channel.pose_history)} poses, needs "
            f"{channel.buffer_size}; step the simulation first"
        )
    stale = channel.pose_history[-channel.buffer_size]
    perceived = world_to_camera(world.rig, stale, world.pad_world)
    perceived = perceived + world.rng.normal(0.0, channel.noise_sigma, 3)
    return perceived, stale


def pad_camera_truth(world: SimWorld) -> np.ndarray:
    """Ground-truth pad position in the camera frame at the current pose."""
    return world_to_camera(world.rig, world.quad, world.pad_world)


def step(world: SimWorld, waypoint, dt: float = FRAME_DT) -> SimWorld:
    """Advance one frame of first-order waypoint tracking.

    The pre-step pose is pushed into the lag buffer, velocity is set to
    K_P * (waypoint - p) clipped to V_MAX, and the attitude follows a
    small-angle tilt proportional to the commanded acceleration.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    wp = np.asarray(waypoint, dtype=float)
    clamped = np.clip(wp, world.workspace.lo, world.workspace.hi)
    if not np.array_equal(wp, clamped):
        warnings.warn("waypoint outside the workspace; clamped", stacklevel=2)
    quad = world.quad
    world.channel.pose_history.append(Pose(world.clock, quad.p.copy(), quad.phi.copy()))

    v_cmd = K_P * (clamped - quad.p)
    speed = float(np.linalg.norm(v_cmd))
    if speed > V_MAX:
        v_cmd *= V_MAX / speed
    accel = (v_cmd - quad.v) / dt
    tilt_cmd = np.clip(
        TILT_GAIN * np.array([-accel[1], accel[0], 0.0]), -TILT_MAX, TILT_MAX
    )
    blend = min(1.0, ATT_RATE * dt)
    phi_new = quad.phi + blend * (tilt_cmd - quad.phi)
    quad.omega = (phi_new - quad.phi) / dt
    quad.phi = phi_new
    quad.v = v_cmd
    quad.p = np.clip(quad.p + v_cmd * dt, world.workspace.lo, world.workspace.hi)
    world.clock += dt
    return world


def observe(world: SimWorld) -> Sample:
    """One measurement: camera-frame features, ground truth, perceived value."""
    rotation, _ = camera_axes(world.rig, world.quad)
    v_c = rotation.T @ world.quad.v
    omega_c = world.rig.rotation.T @ world.quad.omega
    perceived, _ = perceive(world)
    state_c = np.concatenate([v_c, omega_c, perceived])
    return Sample(state_c, pad_camera_truth(world), perceived)


class _WaypointPlan:
    """Waypoint trajectory for one data-collection flight.

    Tracks the Lissajous sweep until the visit phase begins, then ramps the
    waypoint along straight lines (at visit_speed, so the vehicle never
    saturates its speed clip) to sampled points near the pad and holds it
    there for a dwell. All randomness comes from a dedicated seeded stream.
    """

    def __init__(self, path: PathConfig, workspace: Box3, total_time: float, seed: int):
        self.path = path
        self.workspace = workspace
        self.visit_start = total_time * (1.0 - path.visit_fraction)
        self.rng = np.random.default_rng([seed, 2])
        self.waypoint: np.ndarray | None = None
        self.target: np.ndarray | None = None
        self.dwell_until = 0.0

    def _sample_visit(self, pad: np.ndarray) -> np.ndarray:
        radius = self.rng.uniform(*self.path.visit_radius)
        angle = self.rng.uniform(0.0, 2.0 * math.pi)
        altitude = self.rng.uniform(*self.path.visit_altitude)
        point = pad + np.array([radius * math.cos(angle), radius * math.sin(angle), altitude])
        return np.clip(point, self.workspace.lo, self.workspace.hi)

    def waypoint_at(self, t: float, dt: float, pad: np.ndarray) -> np.ndarray:
        if t < self.visit_start:
            return path_point(self.path, t)
        if self.waypoint is None:
            self.waypoint = path_point(self.path, self.visit_start)
        if self.target is None:
            if t < self.dwell_until:
                return self.waypoint
            self.target = self._sample_visit(pad)
        gap = self.target - self.waypoint
        dist = float(np.linalg.norm(gap))
        reach = self.path.visit_speed * dt
        if dist <= reach:
            self.waypoint = self.target
            self.target = None
            self.dwell_until = t + self.rng.uniform(*self.path.dwell_time)
        else:
            self.waypoint = self.waypoint + gap * (reach / dist)
        return self.waypoint


def generate_dataset(
    cfg: SimConfig, with_trajectory: bool = False
) -> list[Sample] | tuple[list[Sample], list[dict]]:
    """Fly the data-collection plan at camera rate and record n_samples
    measurements.

    A pure function of the config: the same config produces the same samples.
    With cfg.pads set, the flight is split into equal segments, one pad per
    segment.
    """
    world = make_world(cfg, path_point(cfg.path, 0.0))
    pads = [np.asarray(p, dtype=float) for p in (cfg.pads or [cfg.pad])]
    per_pad = math.ceil(cfg.n_samples / len(pads))
    total_time = (cfg.n_samples + cfg.buffer_size) * cfg.rig.frame_dt
    plan = _WaypointPlan(cfg.path, cfg.workspace, total_time, cfg.seed)
    samples: list[Sample] = []
    trajectory: list[dict] = []
    while len(samples) < cfg.n_samples:
        world.pad_world = pads[min(len(samples) // per_pad, len(pads) - 1)]
        waypoint = plan.waypoint_at(world.clock, cfg.rig.frame_dt, world.pad_world)
        step(world, waypoint, cfg.rig.frame_dt)
        if len(world.channel.pose_history) < cfg.buffer_size:
            continue
        sample = observe(world)
        samples.append(sample)
        if with_trajectory:
            trajectory.append(
                {
                    "t": world.clock,
                    "p": world.quad.p.copy(),
                    "v": world.quad.v.copy(),
                    "waypoint": waypoint,
                    "yhat_w": camera_to_world(cfg.rig, world.quad, sample.perceived_c),
                }
            )
    if with_trajectory:
        return samples, trajectory
    return samples


def write_trajectory_csv(path, rows: list[dict]) -> None:
    """Trajectory trace: t, position, velocity, waypoint, perceived pad (world)."""
    header = (
        "t,px,py,pz,vx,vy,vz,wx,wy,wz,yhatx,yhaty,yhatz"
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            cells = [jsonio.fmt(row["t"])]
            for key in ("p", "v", "waypoint", "yhat_w"):
                cells.extend(jsonio.fmt(x) for x in row[key])
            fh.write(",".join(cells) + "\n")


def frame_fingerprint(rig: CameraRig) -> str:
    """Hash binding a dataset/model to its camera rig and feature layout."""
    doc = {
        "rotation": rig.rotation,
        "translation": rig.translation,
        "frame_dt": rig.frame_dt,
        "features": FEATURE_DESCRIPTOR,
    }
    return "sha256:" + hashlib.sha256(jsonio.render(doc).encode("utf-8")).hexdigest()
