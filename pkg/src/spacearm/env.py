"""Capture environment for the free-floating arm.

An agent step supplies a bounded end-effector twist; the environment
turns it into a constant-twist reference trajectory, tracks it with the
task-space controller over several integration substeps, and scores the
resulting state.  Task 1 is free tracking of a drifting target with no
obstacle; task 2 adds a box obstacle between the arm and a stationary
target and terminates on capture.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import control, robot
from .errors import ConfigInvalid, NearSingular, SeedExhausted
from .se3 import (
    REORTHONORMALIZE_EVERY,
    Pose,
    Rotation,
    compose,
    exp_se3,
    project_rotation,
)

CAPTURE_STATE_DIM = 38
OBSTACLE_SURFACE_COUNT = 26


def euler_zyx(r: np.ndarray) -> np.ndarray:
    """Intrinsic z-y-x angles (yaw, pitch, roll) of a rotation matrix."""
    sy = -r[2, 0]
    if abs(sy) >= 1.0 - 1e-12:
        pitch = math.copysign(math.pi / 2.0, sy)
        return np.array([math.atan2(-r[0, 1], r[1, 1]), pitch, 0.0])
    return np.array(
        [
            math.atan2(r[1, 0], r[0, 0]),
            math.asin(sy),
            math.atan2(r[2, 1], r[2, 2]),
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _rotation_aligning(direction: np.ndarray) -> np.ndarray:
    """Rotation taking the x axis onto a unit direction."""
    x = np.array([1.0, 0.0, 0.0])
    c = float(x @ direction)
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        return np.diag([-1.0, -1.0, 1.0])
    axis = np.cross(x, direction)
    axis /= np.linalg.norm(axis)
    angle = math.acos(c)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


@dataclasses.dataclass(frozen=True)
class RewardConfig:
    """Weights of the shaping terms.

    manipulability_floor defaults to half the controller's barrier
    threshold when left unset.
    """

    distance_weight: float = 1.0
    capture_bonus: float = 50.0
    singular_penalty: float = 10.0
    manipulability_floor: float | None = None
    proximity_weight: float = 5.0
    danger_radius: float = 0.1
    danger_sharpness: float = 0.005
    collision_penalty: float = 100.0
    collision_radius: float = 0.02
    capture_radius: float = 0.05


@dataclasses.dataclass(frozen=True)
class EnvConfig:
    """Environment parameters; validate() screens them before use."""

    task: int = 1
    dt: float = 0.1
    substeps: int = 10
    max_steps: int = 200
    action_bound_linear: float = 0.2
    action_bound_angular: float = 0.5
    rate_limit: float = 2.5
    target_distance: tuple = (0.15, 0.45)
    target_speed: float = 0.02
    redirect_period: float = 1.0
    lambda_limit: float | None = None
    gradient_refresh: int = 10
    integral_limit: float = 5.0
    joint_perturbation: float = 0.3
    reset_attempts: int = 1000
    obstacle_half_extents: tuple = (0.04, 0.12, 0.12)
    obstacle_fraction: tuple = (0.4, 0.7)
    obstacle_tilt_max: float = math.pi / 4.0
    rewards: RewardConfig = dataclasses.field(default_factory=RewardConfig)

    def validate(self) -> None:
        if self.task not in (1, 2):
            raise ConfigInvalid(f"task must be 1 or 2, got {self.task}")
        if self.dt <= 0.0 or self.substeps < 1:
            raise ConfigInvalid("dt must be positive and substeps at least 1")
        if self.max_steps < 1:
            raise ConfigInvalid("max_steps must be at least 1")
        if self.action_bound_linear <= 0.0 or self.action_bound_angular <= 0.0:
            raise ConfigInvalid("action bounds must be positive")
        if self.rate_limit <= 0.0:
            raise ConfigInvalid("rate_limit must be positive")
        lo, hi = self.target_distance
        if not 0.0 < lo < hi:
            raise ConfigInvalid("target_distance must be an increasing positive pair")
        if self.lambda_limit is not None and self.lambda_limit <= 0.0:
            raise ConfigInvalid("lambda_limit must be positive when given")
        lo, hi = self.obstacle_fraction
        if not 0.0 < lo < hi < 1.0:
            raise ConfigInvalid("obstacle_fraction must lie inside (0, 1)")
        r = self.rewards
        for name in (
            "distance_weight",
            "capture_bonus",
            "singular_penalty",
            "proximity_weight",
            "danger_sharpness",
            "collision_penalty",
        ):
            if getattr(r, name) < 0.0:
                raise ConfigInvalid(f"rewards.{name} must be non-negative")
        if r.capture_radius <= 0.0 or r.collision_radius <= 0.0:
            raise ConfigInvalid("capture and collision radii must be positive")

    @property
    def action_bounds(self) -> np.ndarray:
        return np.array(
            [self.action_bound_linear] * 3 + [self.action_bound_angular] * 3
        )


def auto_lambda_limit(model: robot.ManipulatorModel) -> float:
    """Barrier threshold: a tenth of the nominal-posture manipulability."""
    jac = robot.jacobians(model, Pose.identity(), model.nominal_config)
    return 0.1 * robot.manipulability(jac.j_ee)


@dataclasses.dataclass
class ObstacleBox:
    """Oriented box with cached surface samples."""

    center: np.ndarray
    rotation: np.ndarray
    half_extents: np.ndarray

    def surface_points(self) -> np.ndarray:
        """26 samples: corners, edge midpoints and face centres."""
        signs = np.array(
            [
                [sx, sy, sz]
                for sx in (-1.0, 0.0, 1.0)
                for sy in (-1.0, 0.0, 1.0)
                for sz in (-1.0, 0.0, 1.0)
                if (sx, sy, sz) != (0.0, 0.0, 0.0)
            ]
        )
        local = signs * self.half_extents
        return local @ self.rotation.T + self.center

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Exterior distance from each point to the box (zero inside)."""
        local = (np.atleast_2d(points) - self.center) @ self.rotation
        outside = np.maximum(np.abs(local) - self.half_extents, 0.0)
        return np.linalg.norm(outside, axis=1)


@dataclasses.dataclass
class StepOutcome:
    """Result of one agent step."""

    state: np.ndarray
    reward: float
    terminal: bool
    truncated: bool
    event: str
    info: dict


def capture_state_layout() -> dict:
    """Slice map of the capture state vector."""
    names = [
        ("joint_angles", 7),
        ("joint_rates", 7),
        ("ee_position", 3),
        ("ee_velocity", 3),
        ("ee_angles", 3),
        ("ee_angular_velocity", 3),
        ("target_position", 3),
        ("target_velocity", 3),
        ("target_angles", 3),
        ("target_angular_velocity", 3),
    ]
    layout = {}
    offset = 0
    for name, width in names:
        layout[name] = slice(offset, offset + width)
        offset += width
    return layout


class CaptureEnv:
    """Simulated capture scenario around the task-space controller.

    All randomness flows through the generator handed to reset, so a
    fixed (seed, episode) pair reproduces an episode exactly.
    """

    def __init__(self, model: robot.ManipulatorModel, config: EnvConfig):
        config.validate()
        self.model = model
        self.config = config
        self.lambda_limit = (
            config.lambda_limit
            if config.lambda_limit is not None
            else auto_lambda_limit(model)
        )
        rewards = config.rewards
        if rewards.manipulability_floor is None:
            rewards = dataclasses.replace(
                rewards, manipulability_floor=0.5 * self.lambda_limit
            )
        self.rewards = rewards
        self.controller = control.TaskSpaceController(
            model,
            control.default_gains(),
            control.SingularityConfig(
                lambda_limit=self.lambda_limit,
                gradient_refresh=config.gradient_refresh,
            ),
            integral_limit=config.integral_limit,
        )
        self.base_pose = Pose.identity()
        self.phi = model.nominal_config.copy()
        self.phi_dot = np.zeros(model.n)
        self.target_pose = Pose.identity()
        self.target_velocity = np.zeros(3)
        self.obstacle: ObstacleBox | None = None
        self.step_count = 0
        self._substeps_total = 0
        self._redirect_left = 0.0
        self._rng: np.random.Generator | None = None
        self._bundle: robot.KinematicsBundle | None = None

    # -- dimensions ------------------------------------------------------

    @property
    def capture_state_dim(self) -> int:
        return CAPTURE_STATE_DIM

    @property
    def state_dim(self) -> int:
        if self.config.task == 1:
            return CAPTURE_STATE_DIM
        n_link = self.model.n * self.model.points_per_link
        return CAPTURE_STATE_DIM + 3 + 3 * n_link + 3 * OBSTACLE_SURFACE_COUNT

    @property
    def action_dim(self) -> int:
        return 6

    # -- reset -----------------------------------------------------------

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Draw a fresh episode; rejection-samples a well-posed layout."""
        self._rng = rng
        cfg = self.config
        for _ in range(cfg.reset_attempts):
            phi = self.model.nominal_config + rng.uniform(
                -cfg.joint_perturbation, cfg.joint_perturbation, self.model.n
            )
            bundle = robot.full_kinematics(self.model, phi)
            if robot.manipulability(bundle.jac.j_ee) <= self.lambda_limit:
                continue
            ee = bundle.ee_pose.position
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            dist = rng.uniform(*cfg.target_distance)
            target_pos = ee + direction * dist
            if (
                np.linalg.norm(target_pos - self.model.workspace_center)
                > 0.95 * self.model.reach
            ):
                continue
            obstacle = None
            if cfg.task == 2:
                obstacle = self._sample_obstacle(rng, ee, target_pos)
                if obstacle is None:
                    continue
                joints = [p.position for p in robot.world_poses(
                    Pose.identity(), robot.forward_kinematics(self.model, phi)
                )]
                body = robot.link_points(
                    np.array(joints), self.model.points_per_link
                )
                clearance = obstacle.distance(body).min()
                if clearance <= self.rewards.danger_radius:
                    continue
            self._install(phi, target_pos, obstacle, rng)
            return self._state()
        raise SeedExhausted(
            f"no admissible initial layout in {cfg.reset_attempts} draws"
        )

    def _sample_obstacle(self, rng, ee, target_pos):
        cfg = self.config
        chord = target_pos - ee
        length = np.linalg.norm(chord)
        direction = chord / length
        frac = rng.uniform(*cfg.obstacle_fraction)
        center = ee + frac * chord
        tilt_axis = rng.normal(size=3)
        tilt_axis /= np.linalg.norm(tilt_axis)
        tilt = exp_se3(
            np.concatenate([np.zeros(3), tilt_axis]),
            rng.uniform(0.0, cfg.obstacle_tilt_max),
        ).rotation.r
        box = ObstacleBox(
            center=center,
            rotation=tilt @ _rotation_aligning(direction),
            half_extents=np.asarray(cfg.obstacle_half_extents, dtype=float),
        )
        # the box must not swallow either endpoint of the approach
        margin = self.rewards.capture_radius + self.rewards.collision_radius
        if box.distance(np.array([ee, target_pos])).min() <= margin:
            return None
        return box

    def _install(self, phi, target_pos, obstacle, rng):
        cfg = self.config
        self.phi = phi
        self.phi_dot = np.zeros(self.model.n)
        self.base_pose = Pose.identity()
        self.target_pose = Pose(Rotation(random_rotation(rng)), target_pos)
        self.obstacle = obstacle
        if cfg.task == 1:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            self.target_velocity = cfg.target_speed * direction
            self._redirect_left = cfg.redirect_period
        else:
            self.target_velocity = np.zeros(3)
            self._redirect_left = math.inf
        self.step_count = 0
        self._substeps_total = 0
        self.controller.reset()
        self._bundle = robot.full_kinematics(self.model, phi)

    # -- stepping --------------------------------------------------------

    def step(self, action: np.ndarray) -> StepOutcome:
        """Track the commanded twist for one agent step and score it."""
        if self._rng is None:
            raise ConfigInvalid("reset must be called before step")
        cfg = self.config
        action = np.clip(
            np.asarray(action, dtype=float), -cfg.action_bounds, cfg.action_bounds
        )
        dt_sub = cfg.dt / cfg.substeps
        bundle = self._bundle
        ref_origin = compose(self.base_pose, bundle.ee_pose)
        fault = False
        for k in range(cfg.substeps):
            reference = compose(ref_origin, exp_se3(action, (k + 1) * dt_sub))
            try:
                result = self.controller.substep(
                    self.base_pose,
                    self.phi,
                    self.phi_dot,
                    reference,
                    action,
                    dt_sub,
                    bundle,
                )
            except NearSingular:
                fault = True
                break
            rates = result.phi_dot
            peak = np.abs(rates).max()
            if peak > cfg.rate_limit:
                rates = rates * (cfg.rate_limit / peak)
            base_twist = bundle.jac.j_bm @ rates
            self.base_pose = compose(self.base_pose, exp_se3(base_twist, dt_sub))
            self.phi = self.phi + rates * dt_sub
            self.phi_dot = rates
            self._advance_target(dt_sub)
            self._substeps_total += 1
            if self._substeps_total % REORTHONORMALIZE_EVERY == 0:
                self.base_pose = Pose(
                    project_rotation(self.base_pose.rotation.r),
                    self.base_pose.position,
                )
            bundle = robot.full_kinematics(self.model, self.phi)
            if not np.all(np.isfinite(self.phi)):
                fault = True
                break
        self._bundle = bundle
        self.step_count += 1
        return self._score(bundle, fault)

    def _advance_target(self, dt_sub: float) -> None:
        cfg = self.config
        if cfg.task != 1:
            return
        self.target_pose = Pose(
            self.target_pose.rotation,
            self.target_pose.position + self.target_velocity * dt_sub,
        )
        self._redirect_left -= dt_sub
        if self._redirect_left <= 1e-12:
            direction = self._rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            self.target_velocity = cfg.target_speed * direction
            self._redirect_left = cfg.redirect_period

    # -- scoring ---------------------------------------------------------

    def _body_points(self, bundle) -> np.ndarray:
        world = robot.world_poses(
            self.base_pose, [bundle.pose(i) for i in range(self.model.n + 1)]
        )
        joints = np.array([p.position for p in world])
        return robot.link_points(joints, self.model.points_per_link)

    def _score(self, bundle, fault: bool) -> StepOutcome:
        cfg, rew = self.config, self.rewards
        ee_world = compose(self.base_pose, bundle.ee_pose)
        lam = robot.manipulability(bundle.jac.j_ee)
        distance = float(
            np.linalg.norm(ee_world.position - self.target_pose.position)
        )
        captured = distance <= rew.capture_radius
        low_manip = lam <= rew.manipulability_floor

        reward = -rew.distance_weight * distance
        components = {"distance": -rew.distance_weight * distance}
        if captured:
            reward += rew.capture_bonus
            components["capture"] = rew.capture_bonus
        if low_manip:
            reward -= rew.singular_penalty
            components["singular"] = -rew.singular_penalty

        collided = False
        proximity = 0.0
        if self.obstacle is not None:
            body = self._body_points(bundle)
            surface = self.obstacle.surface_points()
            gaps = np.linalg.norm(
                body[:, None, :] - surface[None, :, :], axis=2
            )
            proximity = float(
                np.exp(
                    -((gaps - rew.danger_radius) ** 2) / rew.danger_sharpness
                ).max()
            )
            reward -= rew.proximity_weight * proximity
            components["proximity"] = -rew.proximity_weight * proximity
            collided = bool(self.obstacle.distance(body).min() <= rew.collision_radius)
            if collided:
                reward -= rew.collision_penalty
                components["collision"] = -rew.collision_penalty

        if fault:
            event = "fault"
            terminal = True
        elif collided:
            event = "collision"
            terminal = True
        elif captured:
            event = "capture"
            terminal = cfg.task == 2
        else:
            event = "none"
            terminal = False
        truncated = not terminal and self.step_count >= cfg.max_steps

        mass = bundle.mass
        base_twist = bundle.jac.j_bm @ self.phi_dot
        residual = float(
            np.linalg.norm(robot.momentum(mass, base_twist, self.phi_dot))
        )
        info = {
            "distance": distance,
            "manipulability": lam,
            "proximity": proximity,
            "momentum_residual": residual,
            "reward_terms": components,
            "captured": captured,
        }
        return StepOutcome(
            state=self._state(),
            reward=float(reward),
            terminal=terminal,
            truncated=truncated,
            event=event,
            info=info,
        )

    # -- state assembly --------------------------------------------------

    def _state(self) -> np.ndarray:
        bundle = self._bundle
        ee_world = compose(self.base_pose, bundle.ee_pose)
        ee_body_twist = bundle.jac.j_ee @ self.phi_dot
        r_ee = ee_world.rotation.r
        capture = np.concatenate(
            [
                self.phi,
                self.phi_dot,
                ee_world.position,
                r_ee @ ee_body_twist[:3],
                euler_zyx(r_ee),
                r_ee @ ee_body_twist[3:],
                self.target_pose.position,
                self.target_velocity,
                euler_zyx(self.target_pose.rotation.r),
                np.zeros(3),
            ]
        )
        if self.config.task == 1:
            return capture
        body = self._body_points(bundle)
        surface = self.obstacle.surface_points()
        return np.concatenate(
            [capture, self.obstacle.center, body.ravel(), surface.ravel()]
        )
