"""Safe-landing state machine driven by contract queries.

The loop measures the pad, asks the contract for an uncertainty ellipsoid,
and trusts the measurement only when the ellipsoid fits inside the target
box. Untrusted measurements send the vehicle to the ellipsoid surface for a
closer look; trusted ones trigger the motor-shutoff point computed from the
ellipsoid's axis-aligned extremes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry, simulation
from .contract import Sample
from .geometry import Box3, DegenerateEllipsoidError, Ellipsoid

# Target box around the pad: +/- 5 cm laterally, 0..5 cm above.
def target_box() -> Box3:
    return Box3(np.array([-0.05, -0.05, 0.0]), np.array([0.05, 0.05, 0.05]))


# Shape matrix of the do-not-trust fallback ellipsoid (half-extents of 100 m).
FALLBACK_SHAPE_SCALE = 0.01
# Shape matrix of the trivial baseline contract (half-extents of 1e-4 m).
TRIVIAL_SHAPE_SCALE = 10000.0
ASCEND_STEP = 0.5  # m, fallback climb when already inside the ellipsoid


class MachineState(enum.Enum):
    MEASURING = "measuring"
    NEW_WAYPOINT = "new_waypoint"
    LANDING = "landing"
    DONE = "done"
    ABORTED = "aborted"


# Legal transitions of the landing state machine, plus abort edges from any
# non-terminal state.
TRANSITIONS = {
    (MachineState.MEASURING, MachineState.NEW_WAYPOINT),
    (MachineState.MEASURING, MachineState.LANDING),
    (MachineState.NEW_WAYPOINT, MachineState.MEASURING),
    (MachineState.LANDING, MachineState.DONE),
    (MachineState.MEASURING, MachineState.ABORTED),
    (MachineState.NEW_WAYPOINT, MachineState.ABORTED),
    (MachineState.LANDING, MachineState.ABORTED),
}


@dataclass(frozen=True)
class LandingConfig:
    g_box: Box3 = field(default_factory=target_box)
    trust_limits: np.ndarray = field(
        default_factory=lambda: np.array([0.1, 0.1, 0.05])
    )
    max_measurements: int = 20
    settle_tolerance: float = 0.03  # m

    def __post_init__(self):
        limits = np.asarray(self.trust_limits, dtype=float)
        if limits.shape != (3,):
            raise ValueError("trust_limits must be a 3-vector")
        if not np.allclose(limits, self.g_box.extent, atol=1e-12):
            raise ValueError(
                "trust_limits must equal the target-box extents: the trust test "
                "is exactly 'ellipsoid fits in the box'"
            )
        if self.max_measurements < 1:
            raise ValueError("max_measurements must be >= 1")
        if self.settle_tolerance <= 0:
            raise ValueError("settle_tolerance must be positive")
        object.__setattr__(self, "trust_limits", limits)


@dataclass(frozen=True)
class ApproachConfig:
    """Initial leg flown before the first measurement."""

    target: np.ndarray
    frames: int = 45

    def __post_init__(self):
        target = np.asarray(self.target, dtype=float)
        if target.shape != (3,):
            raise ValueError("approach target must be a 3-vector")
        if self.frames < 0:
            raise ValueError("approach frames must be nonnegative")
        object.__setattr__(self, "target", target)


@dataclass
class Measurement:
    position: np.ndarray        # vehicle position when the measurement was taken
    perceived_world: np.ndarray
    ellipsoid_world: Ellipsoid
    trusted: bool
    degenerate: bool = False


@dataclass
class TraceEvent:
    time: float
    state: MachineState
    position: np.ndarray
    ellipsoid: Ellipsoid | None = None
    waypoint: np.ndarray | None = None


@dataclass
class LandingTrace:
    events: list[TraceEvent]
    shutdown_point: np.ndarray | None
    success: bool
    measurement_count: int
    abort_reason: str | None
    pad_world: np.ndarray

    def validate(self) -> None:
        if not self.events:
            raise ValueError("trace has no events")
        if self.events[0].state is not MachineState.MEASURING:
            raise ValueError("trace must start in the measuring state")
        if self.events[-1].state not in (MachineState.DONE, MachineState.ABORTED):
            raise ValueError("trace must end in a terminal state")
        for prev, cur in zip(self.events, self.events[1:]):
            if (prev.state, cur.state) not in TRANSITIONS:
                raise ValueError(f"illegal transition {prev.state} -> {cur.state}")
        n_measurements = sum(1 for e in self.events if e.state is MachineState.MEASURING)
        if n_measurements != self.measurement_count:
            raise ValueError("measurement_count does not match the event log")
        if self.success and self.shutdown_point is None:
            raise ValueError("a successful trace needs exactly one shutdown point")

    def to_dict(self) -> dict:
        return {
            "events": [
                {
                    "t": e.time,
                    "state": e.state.value,
                    "position": e.position.tolist(),
                    "ellipsoid": geometry.ellipsoid_to_dict(e.ellipsoid)
                    if e.ellipsoid is not None
                    else None,
                    "waypoint": e.waypoint.tolist() if e.waypoint is not None else None,
                }
                for e in self.events
            ],
            "shutdown_point": None
            if self.shutdown_point is None
            else self.shutdown_point.tolist(),
            "success": self.success,
            "measurement_count": self.measurement_count,
            "abort_reason": self.abort_reason,
            "pad_world": self.pad_world.tolist(),
        }

    def measurement_rows(self) -> list[dict]:
        """Per-measurement rows for CSV export: position, ellipsoid box, verdict."""
        rows = []
        index = 0
        for event in self.events:
            if event.state is not MachineState.MEASURING or event.ellipsoid is None:
                continue
            box = geometry.aabb(event.ellipsoid)
            trusted = geometry.fits_in_box(event.ellipsoid, np.asarray([0.1, 0.1, 0.05]))
            rows.append(
                {
                    "index": index,
                    "position": event.position,
                    "aabb_lo": box.lo,
                    "aabb_hi": box.hi,
                    "trusted": trusted,
                }
            )
            index += 1
        return rows


def trivial_ipc(perceived) -> Ellipsoid:
    """Baseline contract: a tiny fixed ball around the perceived value."""
    return Ellipsoid(np.asarray(perceived, dtype=float), TRIVIAL_SHAPE_SCALE * np.eye(3))


def trivial_query(state_c, perceived_c) -> Ellipsoid:
    """query_fn adapter for the baseline; ignores the state features."""
    return trivial_ipc(perceived_c)


def ellipsoid_to_world(e: Ellipsoid, rotation: np.ndarray, origin: np.ndarray) -> Ellipsoid:
    """Rigid camera-to-world transform: move the center, rotate the shape."""
    return Ellipsoid(rotation @ e.center + origin, e.shape @ rotation.T)


def measure_and_decide(query_fn, world: simulation.SimWorld, cfg: LandingConfig) -> Measurement:
    """Take one measurement and decide whether to trust it.

    Runs the perception channel, queries the contract in the camera frame,
    converts the ellipsoid to the world frame, and trusts it iff it fits in
    the target box. A degenerate contract output is replaced by a huge
    fallback ellipsoid, which can never be trusted.
    """
    sample = simulation.observe(world)
    rotation, origin = simulation.camera_axes(world.rig, world.quad)
    perceived_world = rotation @ sample.perceived_c + origin
    try:
        e_cam = query_fn(sample.state_c, sample.perceived_c)
        e_world = ellipsoid_to_world(e_cam, rotation, origin)
        degenerate = False
    except DegenerateEllipsoidError:
        e_world = Ellipsoid(perceived_world, FALLBACK_SHAPE_SCALE * np.eye(3))
        degenerate = True
    trusted = (not degenerate) and geometry.fits_in_box(e_world, cfg.trust_limits)
    return Measurement(world.quad.p.copy(), perceived_world, e_world, trusted, degenerate)


def next_waypoint(e: Ellipsoid, position, workspace: Box3) -> np.ndarray:
    """Waypoint for another measurement: the ellipsoid surface toward its
    center, or a vertical climb when the vehicle is already inside."""
    position = np.asarray(position, dtype=float)
    if geometry.gauge(e, position) > 1.0:
        wp = geometry.surface_waypoint(e, position)
    else:
        wp = position + np.array([0.0, 0.0, ASCEND_STEP])
    return np.clip(wp, workspace.lo, workspace.hi)


def turnoff_point(e: Ellipsoid) -> np.ndarray:
    """Motor-shutoff point: box-center laterally, box-top vertically."""
    box = geometry.aabb(e)
    return np.array(
        [
            0.5 * (box.lo[0] + box.hi[0]),
            0.5 * (box.lo[1] + box.hi[1]),
            box.hi[2],
        ]
    )


def fly_to(
    world: simulation.SimWorld, waypoint, tolerance: float, max_steps: int = 3000
) -> bool:
    """Step the simulator toward a waypoint until within tolerance."""
    wp = np.clip(np.asarray(waypoint, dtype=float), world.workspace.lo, world.workspace.hi)
    for _ in range(max_steps):
        if float(np.linalg.norm(world.quad.p - wp)) <= tolerance:
            return True
        simulation.step(world, wp, world.rig.frame_dt)
    return float(np.linalg.norm(world.quad.p - wp)) <= tolerance


def run_landing(
    query_fn,
    world: simulation.SimWorld,
    cfg: LandingConfig,
    approach: ApproachConfig | None = None,
) -> LandingTrace:
    """Execute the landing state machine until shutdown or abort.

    Success means the commanded shutdown point lies in the target box around
    the true pad (the simulator has no post-shutdown free fall). With no
    approach leg, the vehicle hovers in place long enough to warm the lag
    buffer before the first measurement.
    """
    if approach is None:
        approach = ApproachConfig(world.quad.p.copy(), frames=world.channel.buffer_size)
    warmup_frames = max(approach.frames, world.channel.buffer_size)
    approach_target = np.clip(approach.target, world.workspace.lo, world.workspace.hi)
    for _ in range(warmup_frames):
        simulation.step(world, approach_target, world.rig.frame_dt)

    events: list[TraceEvent] = []

    def record(state: MachineState, ellipsoid=None, waypoint=None):
        events.append(
            TraceEvent(world.clock, state, world.quad.p.copy(), ellipsoid, waypoint)
        )

    def finish(shutdown, success, count, reason):
        trace = LandingTrace(
            events=events,
            shutdown_point=shutdown,
            success=success,
            measurement_count=count,
            abort_reason=reason,
            pad_world=world.pad_world.copy(),
        )
        trace.validate()
        return trace

    measurements = 0
    while True:
        measurement = measure_and_decide(query_fn, world, cfg)
        measurements += 1
        record(MachineState.MEASURING, ellipsoid=measurement.ellipsoid_world)
        if measurement.trusted:
            shutdown = np.clip(
                turnoff_point(measurement.ellipsoid_world),
                world.workspace.lo,
                world.workspace.hi,
            )
            record(MachineState.LANDING, waypoint=shutdown)
            if not fly_to(world, shutdown, cfg.settle_tolerance):
                record(MachineState.ABORTED)
                return finish(None, False, measurements, "failed to reach the shutoff point")
            success = geometry.box_offset_contains(world.pad_world, cfg.g_box, shutdown)
            record(MachineState.DONE)
            return finish(shutdown, success, measurements, None)
        if measurements >= cfg.max_measurements:
            record(MachineState.ABORTED)
            return finish(None, False, measurements, "measurement budget exhausted")
        waypoint = next_waypoint(measurement.ellipsoid_world, world.quad.p, world.workspace)
        record(MachineState.NEW_WAYPOINT, waypoint=waypoint)
        if not fly_to(world, waypoint, cfg.settle_tolerance):
            record(MachineState.ABORTED)
            return finish(None, False, measurements, "failed to reach the waypoint")


def run_experiment(
    query_fn,
    sim_cfg: simulation.SimConfig,
    cfg: LandingConfig,
    n_runs: int,
    seed: int,
    approach_frames: int = 45,
) -> list[LandingTrace]:
    """Repeat the landing task over randomly placed pads and start points.

    Run i derives everything from (seed, i): the pad location, the start
    position (at least 1.5 m away laterally), the approach leg toward a point
    above the pad, and the world's noise stream. The approach leg ends before
    the vehicle settles, so the first measurement happens in motion.
    """
    traces = []
    for i in range(n_runs):
        rng = np.random.default_rng([seed, i])
        pad = np.array([rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), 0.0])
        while True:
            start = np.array(
                [rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5), rng.uniform(1.0, 2.0)]
            )
            if np.linalg.norm((start - pad)[:2]) >= 1.5:
                break
        world_seed = int(rng.integers(2**31))
        world = simulation.make_world(
            replace(sim_cfg, pad=(pad[0], pad[1], 0.0)), start, seed=world_seed
        )
        approach = ApproachConfig(
            target=np.array([pad[0], pad[1], 1.2]), frames=approach_frames
        )
        traces.append(run_landing(query_fn, world, cfg, approach))
    return traces
