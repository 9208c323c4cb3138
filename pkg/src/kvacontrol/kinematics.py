"""Articulated surgical-tool model: forward kinematics, camera projection,
synthetic trajectories.

The tool is a four-part chain (shaft, wrist, left gripper, right gripper)
driven by a 9-DoF per-frame action: wrist translation p, wrist axis-angle
orientation r, and three hinge angles (shaft-wrist, wrist-left-gripper,
wrist-right-gripper).

Frame conventions (fixed here so rendering is deterministic):
  - camera frame is right-handed, z forward into the scene;
  - the rest configuration (p=0, r=0, all q=0) puts the shaft along -z,
    the wrist just behind the origin, and the grippers extending along
    local +x at the tip;
  - the shaft-wrist hinge rotates about local y, the wrist-gripper hinges
    about local z, with the right gripper mirrored (negative angle).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCamera, InvalidParams, JointLimitViolation, NonFiniteInput

PART_NAMES = ("shaft", "wrist", "left_gripper", "right_gripper")

# semantic class per part: shaft=0, wrist=1, both grippers=2
PART_SEMANTIC_CLASS = {"shaft": 0, "wrist": 1, "left_gripper": 2, "right_gripper": 2}


@dataclass(frozen=True)
class Capsule:
    """Capsule primitive: segment from a to b (part-local, meters) + radius."""

    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if self.radius <= 0:
            raise InvalidParams("capsule radius must be > 0")
        if np.linalg.norm(b - a) <= 0:
            raise InvalidParams("capsule segment must have positive length")


@dataclass(frozen=True)
class JointLimits:
    q_sw: tuple = (-np.pi, np.pi)
    q_lg: tuple = (0.0, np.pi / 2)
    q_rg: tuple = (0.0, np.pi / 2)


def _default_capsules():
    return {
        "shaft": Capsule(np.array([0.0, 0.0, -0.02]), np.array([0.0, 0.0, -0.10]), 0.004),
        "wrist": Capsule(np.array([0.0, 0.0, -0.02]), np.array([0.0, 0.0, 0.0]), 0.003),
        "left_gripper": Capsule(np.array([0.0, 0.0, 0.0]), np.array([0.015, 0.0, 0.0]), 0.002),
        "right_gripper": Capsule(np.array([0.0, 0.0, 0.0]), np.array([0.015, 0.0, 0.0]), 0.002),
    }


@dataclass(frozen=True)
class ToolGeometry:
    """Capsule geometry + hinge axes for the 4-part tool.

    The kinematic tree is fixed: shaft->wrist (hinge q_sw), wrist->left
    gripper (q_lg), wrist->right gripper (q_rg, mirrored).
    """

    capsules: dict = field(default_factory=_default_capsules)
    hinge_sw_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    hinge_grip_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    limits: JointLimits = field(default_factory=JointLimits)

    def __post_init__(self):
        if set(self.capsules) != set(PART_NAMES):
            raise InvalidParams(f"geometry must define exactly the parts {PART_NAMES}")


@dataclass(frozen=True)
class ArticulatedState:
    """One frame's 9-DoF action: wrist translation, wrist axis-angle, 3 hinges."""

    p: np.ndarray
    r: np.ndarray
    q_sw: float
    q_lg: float
    q_rg: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(3)
        r = np.asarray(self.r, dtype=float).reshape(3)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "r", r)

    def as_vector(self):
        return np.concatenate([self.p, self.r, [self.q_sw, self.q_lg, self.q_rg]])

    @staticmethod
    def from_vector(v):
        v = np.asarray(v, dtype=float).reshape(9)
        return ArticulatedState(p=v[:3], r=v[3:6], q_sw=v[6], q_lg=v[7], q_rg=v[8])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels + rigid world->camera extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z_near: float = 1e-4

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParams("fx, fy must be > 0")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidParams("principal point must lie inside the image")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise InvalidParams("rotation must be orthonormal with det +1")


@dataclass(frozen=True)
class Trajectory:
    """Ordered articulated states over frames 0..T-1, sampled every dt seconds."""

    states: tuple
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if len(self.states) < 1:
            raise InvalidParams("trajectory needs at least one frame")
        if self.dt <= 0:
            raise InvalidParams("dt must be > 0")

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True)
class PartPoses:
    """Per-part rigid transforms (local->camera) + world-space capsule endpoints."""

    rotations: dict  # part -> 3x3
    translations: dict  # part -> 3
    endpoints: dict  # part -> (a_world, b_world)
    radii: dict  # part -> radius


def axis_angle_to_matrix(r):
    """Rodrigues formula; r is axis * angle."""
    r = np.asarray(r, dtype=float).reshape(3)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        K = _skew(r)
        return np.eye(3) + K  # first-order; exact at theta=0
    axis = r / theta
    K = _skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def hinge_matrix(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return axis_angle_to_matrix(axis * angle)


def _check_limits(state, geom):
    lim = geom.limits
    for name, q, (lo, hi) in (
        ("q_sw", state.q_sw, lim.q_sw),
        ("q_lg", state.q_lg, lim.q_lg),
        ("q_rg", state.q_rg, lim.q_rg),
    ):
        if not (lo <= q <= hi):
            raise JointLimitViolation(f"{name}={q} outside [{lo}, {hi}]")


def forward_kinematics(state: ArticulatedState, geom: ToolGeometry) -> PartPoses:
    """Pose every part in the camera frame.

    wrist   = (exp(r), p)
    shaft   = wrist o hinge(sw_axis, -q_sw)     (inverse: shaft is the parent)
    grip_l  = wrist o hinge(grip_axis, +q_lg)
    grip_r  = wrist o hinge(grip_axis, -q_rg)   (mirrored)
    """
    vec = state.as_vector()
    if not np.all(np.isfinite(vec)):
        raise NonFiniteInput("articulated state contains non-finite values")
    _check_limits(state, geom)

    R_w = axis_angle_to_matrix(state.r)
    t_w = state.p

    rotations = {"wrist": R_w}
    translations = {"wrist": t_w}

    rotations["shaft"] = R_w @ hinge_matrix(geom.hinge_sw_axis, -state.q_sw)
    translations["shaft"] = t_w
    rotations["left_gripper"] = R_w @ hinge_matrix(geom.hinge_grip_axis, state.q_lg)
    translations["left_gripper"] = t_w
    rotations["right_gripper"] = R_w @ hinge_matrix(geom.hinge_grip_axis, -state.q_rg)
    translations["right_gripper"] = t_w

    endpoints = {}
    radii = {}
    for part in PART_NAMES:
        cap = geom.capsules[part]
        R, t = rotations[part], translations[part]
        endpoints[part] = (R @ cap.a + t, R @ cap.b + t)
        radii[part] = cap.radius
    return PartPoses(rotations=rotations, translations=translations,
                     endpoints=endpoints, radii=radii)


def project_point(cam: CameraModel, x) -> tuple:
    """Pinhole projection of a camera-frame point to (u, v, depth)."""
    x = np.asarray(x, dtype=float).reshape(3)
    z = x[2]
    if z <= cam.z_near:
        raise BehindCamera(f"point depth {z} <= z_near {cam.z_near}")
    u = cam.fx * x[0] / z + cam.cx
    v = cam.fy * x[1] / z + cam.cy
    return (u, v, z)


def unproject_point(cam: CameraModel, u, v, z):
    """Inverse of project_point."""
    return np.array([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])


def _clamp_state(state: ArticulatedState, geom: ToolGeometry) -> ArticulatedState:
    lim = geom.limits
    return replace(
        state,
        q_sw=float(np.clip(state.q_sw, *lim.q_sw)),
        q_lg=float(np.clip(state.q_lg, *lim.q_lg)),
        q_rg=float(np.clip(state.q_rg, *lim.q_rg)),
    )


DEFAULT_BASE_STATE = ArticulatedState(
    p=np.array([0.0, 0.0, 0.11]),
    r=np.array([0.25, 0.15, 0.0]),
    q_sw=0.2,
    q_lg=0.2,
    q_rg=0.2,
)

TRAJECTORY_KINDS = ("static", "linear-transport", "wrist-articulation",
                    "gripper-cycle", "composite")


def synth_trajectory(kind, params=None, T=10, seed=0,
                     geom: ToolGeometry | None = None, dt=1.0 / 30) -> Trajectory:
    """Deterministic synthetic trajectories for testing and demos.

    kinds: static | linear-transport | wrist-articulation | gripper-cycle
    | composite (sum of the moving kinds). Joint angles are clamped to the
    geometry's limits.
    """
    if T < 1:
        raise InvalidParams("T must be >= 1")
    if kind not in TRAJECTORY_KINDS:
        raise InvalidParams(f"unknown trajectory kind {kind!r}")
    params = dict(params or {})
    geom = geom or ToolGeometry()
    rng = np.random.default_rng(seed)

    base = params.get("base", DEFAULT_BASE_STATE)
    velocity = np.asarray(params.get("velocity", [0.05, 0.02, 0.0]), dtype=float)
    rot_amp = float(params.get("rot_amp", 0.5))
    sw_amp = float(params.get("sw_amp", 0.4))
    grip_amp = float(params.get("grip_amp", 0.5))
    period = float(params.get("period", 12.0))
    if period <= 0:
        raise InvalidParams("period must be > 0")
    phase = float(params.get("phase", rng.uniform(0, 2 * np.pi)))

    states = []
    for t in range(T):
        p = base.p.copy()
        r = base.r.copy()
        q_sw, q_lg, q_rg = base.q_sw, base.q_lg, base.q_rg
        w = 2 * np.pi * t / period + phase
        if kind in ("linear-transport", "composite"):
            p = p + velocity * dt * t
        if kind in ("wrist-articulation", "composite"):
            r = r + np.array([0.0, rot_amp * np.sin(w), rot_amp * 0.5 * np.cos(w)])
            q_sw = q_sw + sw_amp * np.sin(w)
        if kind in ("gripper-cycle", "composite"):
            q_lg = q_lg + grip_amp * 0.5 * (1 + np.sin(w))
            q_rg = q_rg + grip_amp * 0.5 * (1 + np.sin(w))
        state = ArticulatedState(p=p, r=r, q_sw=q_sw, q_lg=q_lg, q_rg=q_rg)
        states.append(_clamp_state(state, geom))
    return Trajectory(states=tuple(states), dt=dt)


def default_camera(width=64, height=64) -> CameraModel:
    """Camera whose defaults frame the default tool placement."""
    f = 1.3 * width
    return CameraModel(fx=f, fy=f, cx=width / 2, cy=height / 2,
                       width=width, height=height)
