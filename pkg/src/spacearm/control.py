"""Task-space control for the free-floating arm.

The controller tracks a moving target pose with a PID law expressed in the
end-effector body frame, pushes the arm away from rank-deficient
configurations with a manipulability potential, and spends the remaining
joint-space freedom climbing the manipulability gradient through the
Jacobian nullspace.  The commanded quantity is a joint-rate vector; the
plant integrates it directly, so all gain conditions below are stated for
that velocity-resolved loop.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import robot
from .errors import (
    DimensionMismatch,
    NearSingular,
    NotPositiveDefinite,
    NotSymmetric,
)
from .se3 import Pose, Rotation, adjoint, compose, inverse, skew_vee

NULLSPACE_SIGN_TOL = 1e-9
NULLSPACE_RANK_TOL = 1e-10


def pose_error(current: Pose, target: Pose) -> float:
    """Scalar tracking error combining rotation and translation.

    Half the squared chordal rotation distance, tr(I - R), plus half the
    squared translation offset of the relative pose.  Zero exactly at
    coincidence, symmetric in its arguments.
    """
    rel = compose(inverse(target), current)
    r = rel.rotation.r
    p = rel.position
    return float(0.5 * (3.0 - np.trace(r)) + 0.5 * (p @ p))


def pose_error_gradient(current: Pose, target: Pose) -> np.ndarray:
    """Gradient of pose_error with respect to a body-frame twist at current.

    With rel = inverse(target) * current = (R, P), perturbing the current
    frame by a small body twist delta changes the error at first order by
    grad . delta, where grad has translation block R^T P and rotation
    block skew_vee(R); this is the exact differential of pose_error, so a
    step along -grad reduces the error.
    """
    rel = compose(inverse(target), current)
    r = rel.rotation.r
    p = rel.position
    return np.concatenate([r.T @ p, skew_vee(Rotation(r))])


@dataclasses.dataclass(frozen=True)
class ControllerGains:
    """Diagonal PID gain matrices for the six task-space axes."""

    k_p: np.ndarray
    k_d: np.ndarray
    k_i: np.ndarray

    @staticmethod
    def from_diagonals(k_p, k_d, k_i) -> "ControllerGains":
        return ControllerGains(
            k_p=np.diag(np.asarray(k_p, dtype=float)),
            k_d=np.diag(np.asarray(k_d, dtype=float)),
            k_i=np.diag(np.asarray(k_i, dtype=float)),
        )


@dataclasses.dataclass(frozen=True)
class GainReport:
    """Stability screen outcome for a gain triple.

    Records the eigenvalue extrema of each gain matrix and the two margin
    quantities the screen compares; a margin is satisfied when its left
    side exceeds its right side.
    """

    p_min: float
    p_max: float
    d_min: float
    d_max: float
    i_min: float
    i_max: float
    coupling_left: float
    coupling_right: float
    damping_left: float
    damping_right: float

    @property
    def coupling_ok(self) -> bool:
        return self.coupling_left > self.coupling_right

    @property
    def damping_ok(self) -> bool:
        return self.damping_left > self.damping_right

    @property
    def stable(self) -> bool:
        return self.coupling_ok and self.damping_ok


def _check_gain(mat: np.ndarray, label: str) -> tuple[float, float]:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (6, 6):
        raise DimensionMismatch(f"{label} must be 6x6, got {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise NotSymmetric(f"{label} must be symmetric")
    eigs = np.linalg.eigvalsh(mat)
    if eigs[0] <= 0.0:
        raise NotPositiveDefinite(f"{label} must be positive definite")
    return float(eigs[0]), float(eigs[-1])


def validate_gains(gains: ControllerGains) -> GainReport:
    """Screen PID gains against two spectral margin conditions.

    Both conditions bound the interplay of the integral channel with the
    proportional and derivative channels so that the characteristic
    polynomial of each decoupled axis keeps its roots in the stable
    region with every eigenvalue pairing:

      max(K_p) * max(K_i) > min(K_i)^2
      max(K_p) * min(K_i)^2 > 4 * max(K_d) * max(K_i) + min(K_p)^2 * max(K_i)

    Equal gains on all three channels violate both, so a deliberately
    spread triple is required; scripts/find_stable_gains.py searches for
    one.  Raises on non-symmetric or non-positive-definite input; the
    returned report carries the margins for logging.
    """
    p_min, p_max = _check_gain(gains.k_p, "k_p")
    d_min, d_max = _check_gain(gains.k_d, "k_d")
    i_min, i_max = _check_gain(gains.k_i, "k_i")
    return GainReport(
        p_min=p_min,
        p_max=p_max,
        d_min=d_min,
        d_max=d_max,
        i_min=i_min,
        i_max=i_max,
        coupling_left=p_max * i_max,
        coupling_right=i_min**2,
        damping_left=p_max * i_min**2,
        damping_right=4.0 * d_max * i_max + p_min**2 * i_max,
    )


def default_gains() -> ControllerGains:
    """Shipped gain triple satisfying both margins of validate_gains.

    Found with scripts/find_stable_gains.py: the proportional channel
    needs a spread spectrum (one stiff axis) while integral and
    derivative channels stay uniform and small.  Margins: coupling
    6.0 > 0.25, damping 3.0 > 2.1.
    """
    return ControllerGains.from_diagonals(
        k_p=[2.0, 2.0, 2.0, 2.0, 2.0, 12.0],
        k_d=[0.05] * 6,
        k_i=[0.5] * 6,
    )


@dataclasses.dataclass
class PidState:
    """Mutable integral accumulator for the task-space PID law."""

    integral: np.ndarray

    @staticmethod
    def zero() -> "PidState":
        return PidState(integral=np.zeros(6))


def pid_step(
    gains: ControllerGains,
    state: PidState,
    error_gradient: np.ndarray,
    relative_velocity: np.ndarray,
    dt: float,
) -> np.ndarray:
    """One PID update producing a corrective body-frame twist.

    The integral channel accumulates the error gradient scaled by dt; for
    a target moving at constant twist this supplies the feedforward needed
    to hold zero steady-state error.  The caller owns any anti-windup
    policy on state.integral.
    """
    state.integral = state.integral + error_gradient * dt
    return -(
        gains.k_p @ error_gradient
        + gains.k_d @ relative_velocity
        + gains.k_i @ state.integral
    )


def nullspace_basis(j_ee: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the Jacobian nullspace, as columns.

    Columns follow a fixed sign convention (first component larger than a
    small tolerance is positive) so repeated calls at nearby
    configurations agree.
    """
    j_ee = np.asarray(j_ee, dtype=float)
    if j_ee.ndim != 2 or j_ee.shape[0] != 6:
        raise DimensionMismatch(f"expected a 6xn Jacobian, got {j_ee.shape}")
    _, sv, vt = np.linalg.svd(j_ee)
    rank = int(np.sum(sv > NULLSPACE_RANK_TOL))
    basis = vt[rank:].T
    for k in range(basis.shape[1]):
        col = basis[:, k]
        lead = col[np.abs(col) > NULLSPACE_SIGN_TOL]
        if lead.size and lead[0] < 0.0:
            basis[:, k] = -col
    return basis


def nullspace_control(
    basis: np.ndarray,
    manip_gradient: np.ndarray,
    phi_dot: np.ndarray,
    k_lambda: float,
    k_damp: float,
) -> np.ndarray:
    """Nullspace coordinates that climb manipulability while damping drift.

    The damping term projects the current joint rates onto the nullspace
    through N = basis basis^T and opposes them, so self motion settles
    instead of winding up.
    """
    n_proj = basis @ basis.T
    v = basis.T @ (n_proj @ phi_dot)
    return k_lambda * (basis.T @ manip_gradient) - k_damp * v


@dataclasses.dataclass(frozen=True)
class SingularityConfig:
    """Parameters of the manipulability barrier.

    lambda_limit   -- activation threshold; the barrier is zero above it
    gradient_refresh -- recompute the manipulability gradient every this
                        many substeps while the barrier is inactive (it is
                        always fresh while active); the gradient costs a
                        full finite-difference sweep, so 10 keeps it to
                        once per environment step
    k_lambda       -- nullspace ascent gain
    k_damp         -- nullspace damping gain; the damping acts on the
                      previously commanded rates, so the induced discrete
                      map on the nullspace velocity has factor -k_damp
                      and needs k_damp < 1 to settle
    """

    lambda_limit: float
    gradient_refresh: int = 10
    k_lambda: float = 1.0
    k_damp: float = 0.5


def singularity_potential(lam: float, lambda_limit: float) -> float:
    """Barrier value: rises smoothly from zero as lam falls below the limit."""
    if lam > lambda_limit:
        return 0.0
    if lam <= 0.0:
        return float("inf")
    return 0.5 * (1.0 - lambda_limit / lam) ** 2


def singularity_avoidance(
    lam: float,
    lambda_limit: float,
    manip_gradient: np.ndarray,
    j_ee_pinv: np.ndarray,
) -> np.ndarray:
    """Task-space twist pushing away from the manipulability barrier.

    The barrier gradient in joint space is mapped to the task space
    through the transposed pseudoinverse; descent on the barrier is
    ascent on manipulability, so the returned twist steers the commanded
    motion toward better-conditioned configurations.
    """
    if lam > lambda_limit:
        return np.zeros(6)
    if lam <= 0.0:
        raise NearSingular("manipulability is zero; barrier gradient undefined")
    scale = (lambda_limit / lam**2) * (1.0 - lambda_limit / lam)
    return -(j_ee_pinv.T @ (scale * manip_gradient))


def taskspace_command(
    pid_twist: np.ndarray,
    target_twist_in_ee: np.ndarray,
    avoidance_twist: np.ndarray,
) -> np.ndarray:
    """Commanded absolute end-effector body twist."""
    return pid_twist + target_twist_in_ee + avoidance_twist


def resolve_joint_rates(
    j_ee: np.ndarray,
    command_twist: np.ndarray,
    basis: np.ndarray,
    nullspace_coords: np.ndarray,
) -> np.ndarray:
    """Joint rates realizing a task twist plus nullspace coordinates."""
    return np.linalg.pinv(j_ee) @ command_twist + basis @ nullspace_coords


@dataclasses.dataclass
class SubstepResult:
    """Diagnostics from one controller substep."""

    phi_dot: np.ndarray
    command_twist: np.ndarray
    manipulability: float
    potential: float
    pose_err: float
    barrier_active: bool


class TaskSpaceController:
    """Velocity-resolved tracking controller with singularity handling.

    Combines the PID correction, the target's feedforward twist mapped
    into the end-effector frame, the singularity-avoidance twist and the
    nullspace ascent into one joint-rate command per substep.  Holds the
    PID integral (with a norm clamp so collisions and captures cannot
    wind it up) and the cached manipulability gradient between substeps.
    """

    def __init__(
        self,
        model: robot.ManipulatorModel,
        gains: ControllerGains,
        singularity: SingularityConfig,
        integral_limit: float = 5.0,
    ):
        validate_gains(gains)
        self.model = model
        self.gains = gains
        self.singularity = singularity
        self.integral_limit = float(integral_limit)
        self.pid = PidState.zero()
        self._grad_age = 0
        self._grad_cache: np.ndarray | None = None

    def reset(self) -> None:
        self.pid = PidState.zero()
        self._grad_age = 0
        self._grad_cache = None

    def _manip_gradient(self, phi: np.ndarray, active: bool) -> np.ndarray:
        refresh = max(1, self.singularity.gradient_refresh)
        stale = self._grad_cache is None or self._grad_age >= refresh
        if active or stale:
            self._grad_cache = robot.manipulability_gradient(
                self.model, Pose.identity(), phi
            )
            self._grad_age = 0
        self._grad_age += 1
        return self._grad_cache

    def substep(
        self,
        base_pose: Pose,
        phi: np.ndarray,
        phi_dot: np.ndarray,
        target_pose: Pose,
        target_twist: np.ndarray,
        dt: float,
        bundle: robot.KinematicsBundle | None = None,
    ) -> SubstepResult:
        """Compute the joint-rate command for one integration substep.

        target_pose is expressed in the inertial frame and target_twist in
        the target's body frame.  A precomputed kinematics bundle for
        (model, phi) may be passed to avoid recomputation.
        """
        if bundle is None:
            bundle = robot.full_kinematics(self.model, phi)
        jac = bundle.jac
        ee_world = compose(base_pose, bundle.ee_pose)

        lam = robot.manipulability(jac.j_ee)
        active = lam <= self.singularity.lambda_limit
        grad = self._manip_gradient(phi, active)

        err = pose_error(ee_world, target_pose)
        err_grad = pose_error_gradient(ee_world, target_pose)

        # Velocity error between the end effector and the target, both as
        # body twists in the end-effector frame.
        v_ee = jac.j_ee @ phi_dot
        rel = compose(inverse(ee_world), target_pose)
        v_target_in_ee = adjoint(rel) @ target_twist
        v_rel = v_ee - v_target_in_ee

        pid_twist = pid_step(self.gains, self.pid, err_grad, v_rel, dt)
        norm = np.linalg.norm(self.pid.integral)
        if norm > self.integral_limit:
            self.pid.integral = self.pid.integral * (self.integral_limit / norm)

        j_pinv = np.linalg.pinv(jac.j_ee)
        avoid = singularity_avoidance(lam, self.singularity.lambda_limit, grad, j_pinv)
        command = taskspace_command(pid_twist, v_target_in_ee, avoid)

        basis = nullspace_basis(jac.j_ee)
        coords = nullspace_control(
            basis, grad, phi_dot, self.singularity.k_lambda, self.singularity.k_damp
        )
        rates = j_pinv @ command + basis @ coords
        return SubstepResult(
            phi_dot=rates,
            command_twist=command,
            manipulability=lam,
            potential=singularity_potential(lam, self.singularity.lambda_limit),
            pose_err=err,
            barrier_active=active,
        )
