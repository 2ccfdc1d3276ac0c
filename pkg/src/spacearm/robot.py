"""Free-floating manipulator model and its momentum-coupled kinematics.

A serial arm rides on an uncontrolled carrier body.  The carrier ("base")
frame is frame 0; joint frames 1..n sit on the joint axes; frame n+1 is the
end effector.  Poses returned by the kinematics are relative to frame 0
unless a base pose is supplied to place them in the inertial frame.

Model definition
----------------
The arm is a product of exponentials: each joint contributes a unit screw
axis expressed in frame 0 at the zero configuration, and every joint frame
has a fixed zero-configuration pose.  Spatial inertia is carried per body
(base plus n links) as mass, center of mass and rotational inertia in that
body's own frame.

Momentum coupling
-----------------
With no external wrench and zero initial momentum, the system momentum
expressed in the base frame,

    m_b @ V_base + m_bm @ joint_rates,

stays exactly zero.  coupling_jacobian() solves that constraint for the
base twist, and jacobians() folds it into a generalized end-effector
Jacobian: every column maps joint rates to the end-effector twist in the
END-EFFECTOR BODY FRAME, base reaction included.  Body-frame output makes
the Jacobians (and manipulability) independent of where the carrier
currently is, which the tests rely on.

Velocities are everywhere [linear; angular], matching spacearm.se3.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    NearSingular,
    NotPositiveDefinite,
    NotSymmetric,
    SchemaMismatch,
)
from .se3 import Pose, Rotation, _skew

# Manipulability below this is treated as rank deficiency.
RANK_TOL = 1e-10

MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BodyInertia:
    """Mass properties of one rigid body, in that body's own frame."""

    mass: float
    com: np.ndarray
    inertia: np.ndarray  # 3x3 about the center of mass

    def validate(self, label: str) -> None:
        if not self.mass > 0.0:
            raise ConfigInvalid(f"{label}: mass must be positive, got {self.mass}")
        if self.com.shape != (3,) or self.inertia.shape != (3, 3):
            raise DimensionMismatch(f"{label}: com must be (3,), inertia (3, 3)")
        if np.abs(self.inertia - self.inertia.T).max() > 1e-12:
            raise NotSymmetric(f"{label}: rotational inertia must be symmetric")
        if np.linalg.eigvalsh(self.inertia).min() <= 0.0:
            raise NotPositiveDefinite(f"{label}: rotational inertia must be positive definite")

    def spatial(self) -> np.ndarray:
        """6x6 inertia about the body frame origin, [linear; angular] ordering."""
        cx = _skew(self.com)
        out = np.zeros((6, 6))
        out[:3, :3] = self.mass * np.eye(3)
        out[:3, 3:] = -self.mass * cx
        out[3:, :3] = self.mass * cx
        out[3:, 3:] = self.inertia - self.mass * (cx @ cx)
        return out


@dataclass(frozen=True)
class ManipulatorModel:
    """Carrier body plus serial arm.

    screw_axes    -- (n, 6) unit screws in frame 0 at zero configuration
    zero_poses    -- n+1 poses of joint frames 1..n and the end effector,
                     relative to frame 0, at zero configuration
    base_inertia  -- carrier body, about frame 0
    link_inertias -- n entries; link i's body frame is joint frame i
    points_per_link  -- samples per link for proximity checks (near endpoint
                        included, far endpoint left to the next link)
    nominal_config   -- a dexterous posture used as the center of reset
                        sampling and as the reference for automatic
                        manipulability thresholds
    workspace_center -- shoulder pivot in frame 0 at zero configuration
    """

    name: str
    screw_axes: np.ndarray
    zero_poses: tuple[Pose, ...]
    base_inertia: BodyInertia
    link_inertias: tuple[BodyInertia, ...]
    points_per_link: int
    nominal_config: np.ndarray
    workspace_center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n(self) -> int:
        return self.screw_axes.shape[0]

    @property
    def reach(self) -> float:
        return float(np.linalg.norm(self.zero_poses[-1].position - self.workspace_center))

    @functools.cached_property
    def _spatial_inertias(self) -> tuple[np.ndarray, ...]:
        return tuple(b.spatial() for b in (self.base_inertia, *self.link_inertias))

    @functools.cached_property
    def _inertia_stack(self) -> np.ndarray:
        return np.stack(self._spatial_inertias[1:])

    @functools.cached_property
    def _column_mask(self) -> np.ndarray:
        # mask[i, 0, j] = 1 while joint j+1 moves link i+1 (j <= i)
        n = self.n
        return (np.arange(n)[None, :] <= np.arange(n)[:, None]).astype(float)[:, None, :]

    @functools.cached_property
    def _screw_parts(self) -> dict[str, np.ndarray]:
        # Per-joint pieces that turn the screw exponential into scalar
        # blends: R = I + sin(a) K + (1 - cos(a)) K^2 and
        # p = a v + (1 - cos(a)) K v + (a - sin(a)) K^2 v for unit axes.
        w = self.screw_axes[:, 3:]
        v = self.screw_axes[:, :3]
        k = np.stack([_skew(wi) for wi in w])
        k2 = k @ k
        return {
            "k": k,
            "k2": k2,
            "v": v,
            "w": w,
            "kv": (k @ v[:, :, None])[:, :, 0],
            "k2v": (k2 @ v[:, :, None])[:, :, 0],
        }

    @functools.cached_property
    def _zero_rs(self) -> np.ndarray:
        return np.stack([p.rotation.r for p in self.zero_poses])

    @functools.cached_property
    def _zero_ps(self) -> np.ndarray:
        return np.stack([p.position for p in self.zero_poses])

    def validate(self) -> None:
        n = self.n
        if n < 7:
            raise ConfigInvalid(f"nullspace control needs at least 7 joints, model has {n}")
        if self.screw_axes.shape != (n, 6):
            raise DimensionMismatch("screw_axes must be (n, 6)")
        if len(self.zero_poses) != n + 1:
            raise DimensionMismatch("zero_poses must hold n joint frames plus the end effector")
        if len(self.link_inertias) != n:
            raise DimensionMismatch("link_inertias must hold one entry per joint")
        if self.nominal_config.shape != (n,):
            raise DimensionMismatch("nominal_config must have one angle per joint")
        for i, axis in enumerate(self.screw_axes):
            dominant = np.linalg.norm(axis[3:]) if np.linalg.norm(axis[3:]) > 0.5 \
                else np.linalg.norm(axis[:3])
            if abs(dominant - 1.0) > 1e-9:
                raise ConfigInvalid(f"screw axis {i + 1} is not unit-normalized")
        if self.points_per_link < 1:
            raise ConfigInvalid("points_per_link must be at least 1")
        self.base_inertia.validate("base")
        for i, link in enumerate(self.link_inertias):
            link.validate(f"link {i + 1}")


def _check_phi(model: ManipulatorModel, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (model.n,):
        raise DimensionMismatch(f"expected {model.n} joint angles, got shape {phi.shape}")
    return phi


@dataclass(frozen=True)
class MassMatrix:
    """Blocks of the system mass matrix in the base frame."""

    m_b: np.ndarray   # 6x6 base block
    m_bm: np.ndarray  # 6xn coupling block
    m_m: np.ndarray   # nxn arm block

    def full(self) -> np.ndarray:
        n = self.m_m.shape[0]
        out = np.zeros((6 + n, 6 + n))
        out[:6, :6] = self.m_b
        out[:6, 6:] = self.m_bm
        out[6:, :6] = self.m_bm.T
        out[6:, 6:] = self.m_m
        return out


@dataclass(frozen=True)
class JacobianSet:
    """End-effector-frame velocity maps of the free-floating chain.

    j_b   -- 6x6, base twist (frame 0) to end-effector twist contribution
    j_m   -- 6xn, joint rates to end-effector twist, base frozen
    j_bm  -- 6xn, joint rates to the momentum-conserving base twist
    j_ee  -- 6xn, generalized Jacobian: j_b @ j_bm + j_m
    """

    j_b: np.ndarray
    j_m: np.ndarray
    j_bm: np.ndarray
    j_ee: np.ndarray


@dataclass(frozen=True)
class KinematicsBundle:
    """One-pass kinematics evaluation shared by the controller and plant."""

    body_rs: np.ndarray  # (n+1, 3, 3) frames 1..n and end effector, in frame 0
    body_ps: np.ndarray  # (n+1, 3)
    mass: MassMatrix
    jac: JacobianSet

    def pose(self, i: int) -> Pose:
        return Pose(Rotation(self.body_rs[i]), self.body_ps[i])

    @property
    def ee_pose(self) -> Pose:
        return self.pose(-1)


def _adjoint_inverse_rp(r: np.ndarray, p: np.ndarray) -> np.ndarray:
    """adjoint(inverse(g)) for g = (r, p), without building Pose objects."""
    rt = r.T
    out = np.zeros((6, 6))
    out[:3, :3] = rt
    out[3:, 3:] = rt
    out[:3, 3:] = _skew(-rt @ p) @ rt
    return out


def _batch_skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros((*v.shape[:-1], 3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def full_kinematics(model: ManipulatorModel, phi: np.ndarray) -> KinematicsBundle:
    """Forward kinematics, mass matrix and all Jacobians in one pass."""
    phi = _check_phi(model, phi)
    n = model.n
    zero_rs, zero_ps = model._zero_rs, model._zero_ps

    # Joint exponentials all at once: with unit (or zero) rotation axes the
    # Rodrigues and translation series collapse to scalar blends of the
    # cached per-joint matrices, leaving only the prefix scan sequential.
    parts = model._screw_parts
    s, c = np.sin(phi), np.cos(phi)
    er_all = np.eye(3) + s[:, None, None] * parts["k"] + (1.0 - c)[:, None, None] * parts["k2"]
    ep_all = phi[:, None] * parts["v"] + (1.0 - c)[:, None] * parts["kv"]
    ep_all += (phi - s)[:, None] * parts["k2v"]

    prefix_r = np.empty((n + 1, 3, 3))
    prefix_p = np.empty((n + 1, 3))
    prefix_r[0] = np.eye(3)
    prefix_p[0] = 0.0
    for i in range(n):
        prefix_r[i + 1] = prefix_r[i] @ er_all[i]
        prefix_p[i + 1] = prefix_r[i] @ ep_all[i] + prefix_p[i]

    # Spatial screw columns from the prefixes, batched over joints.
    sp_ang = (prefix_r[:n] @ parts["w"][:, :, None])[:, :, 0]
    sp_lin = (prefix_r[:n] @ parts["v"][:, :, None])[:, :, 0]
    sp_lin += np.cross(prefix_p[:n], sp_ang)
    spatial = np.concatenate([sp_lin.T, sp_ang.T])

    # Body frames: joint frames 1..n use prefixes 1..n, the end effector
    # shares the last joint's prefix.
    idx = np.concatenate([np.arange(1, n + 1), [n]])
    pr = prefix_r[idx]
    body_rs = pr @ zero_rs
    body_ps = np.einsum("iab,ib->ia", pr, zero_ps) + prefix_p[idx]

    # adjoint(inverse(g_i)) for every body frame, batched.
    rt = body_rs[:n].transpose(0, 2, 1)
    t = -np.einsum("iab,ib->ia", rt, body_ps[:n])
    adj_inv = np.zeros((n, 6, 6))
    adj_inv[:, :3, :3] = rt
    adj_inv[:, 3:, 3:] = rt
    adj_inv[:, :3, 3:] = _batch_skew(t) @ rt

    # Composite mass matrix in the base frame.  Link i only feels joints
    # 1..i, which the lower-triangular column mask encodes.
    inertia_stack = model._inertia_stack
    body_jac = adj_inv @ (spatial[None, :, :] * model._column_mask)
    inertia_adj = inertia_stack @ adj_inv
    inertia_jac = inertia_stack @ body_jac
    m_b = model._spatial_inertias[0] + np.einsum("iab,iac->bc", adj_inv, inertia_adj)
    m_bm = np.einsum("iab,iac->bc", adj_inv, inertia_jac)
    m_m = np.einsum("iab,iac->bc", body_jac, inertia_jac)
    m_b = 0.5 * (m_b + m_b.T)
    m_m = 0.5 * (m_m + m_m.T)
    mass = MassMatrix(m_b, m_bm, m_m)

    a_ee = _adjoint_inverse_rp(body_rs[n], body_ps[n])
    j_m = a_ee @ spatial
    j_bm = -np.linalg.solve(m_b, m_bm)
    j_ee = a_ee @ j_bm + j_m
    jac = JacobianSet(j_b=a_ee, j_m=j_m, j_bm=j_bm, j_ee=j_ee)
    return KinematicsBundle(body_rs, body_ps, mass, jac)


def forward_kinematics(model: ManipulatorModel, phi: np.ndarray) -> list[Pose]:
    """Poses of joint frames 1..n and the end effector, relative to frame 0."""
    bundle = full_kinematics(model, phi)
    return [bundle.pose(i) for i in range(model.n + 1)]


def world_poses(base_pose: Pose, body_poses: list[Pose]) -> list[Pose]:
    """Re-express base-relative poses in the inertial frame."""
    r0, p0 = base_pose.rotation.r, base_pose.position
    return [Pose(Rotation(r0 @ g.rotation.r), r0 @ g.position + p0) for g in body_poses]


def mass_matrix(model: ManipulatorModel, phi: np.ndarray) -> MassMatrix:
    return full_kinematics(model, phi).mass


def coupling_jacobian(mass: MassMatrix) -> np.ndarray:
    """Base twist per unit joint rate under zero total momentum."""
    return -np.linalg.solve(mass.m_b, mass.m_bm)


def momentum(mass: MassMatrix, base_twist: np.ndarray, joint_rates: np.ndarray) -> np.ndarray:
    """System momentum in the base frame; zero along conserved trajectories."""
    return mass.m_b @ base_twist + mass.m_bm @ joint_rates


def jacobians(model: ManipulatorModel, base_pose: Pose, phi: np.ndarray) -> JacobianSet:
    """End-effector-frame Jacobians of the free-floating chain.

    base_pose is accepted for interface symmetry with the world-frame
    helpers; body-frame outputs do not depend on it (a property the tests
    check explicitly).
    """
    del base_pose
    return full_kinematics(model, phi).jac


def manipulability(j_ee: np.ndarray) -> float:
    """sqrt(det(J J^T)); zero exactly when the Jacobian loses row rank."""
    j_ee = np.asarray(j_ee, dtype=float)
    if j_ee.ndim != 2 or j_ee.shape[0] != 6:
        raise DimensionMismatch(f"expected a 6xn Jacobian, got {j_ee.shape}")
    det = np.linalg.det(j_ee @ j_ee.T)
    return float(np.sqrt(det)) if det > 0.0 else 0.0


def manipulability_gradient(
    model: ManipulatorModel,
    base_pose: Pose,
    phi: np.ndarray,
    step: float = 1e-6,
) -> np.ndarray:
    """Joint-space gradient of manipulability.

    The Jacobian derivative in each direction is taken by central
    differences through the full momentum-coupled chain, then folded into
    the trace identity for the derivative of sqrt(det(J J^T)).
    """
    phi = _check_phi(model, phi)
    j = full_kinematics(model, phi).jac.j_ee
    gram = j @ j.T
    det = np.linalg.det(gram)
    lam = float(np.sqrt(det)) if det > 0.0 else 0.0
    if lam < RANK_TOL:
        raise NearSingular(f"manipulability {lam:.3e} below rank tolerance")
    gram_inv = np.linalg.inv(gram)
    grad = np.empty(model.n)
    probe = phi.copy()
    for i in range(model.n):
        probe[i] = phi[i] + step
        j_plus = full_kinematics(model, probe).jac.j_ee
        probe[i] = phi[i] - step
        j_minus = full_kinematics(model, probe).jac.j_ee
        probe[i] = phi[i]
        dj = (j_plus - j_minus) / (2.0 * step)
        grad[i] = 0.5 * lam * np.trace(gram_inv @ (j @ dj.T + dj @ j.T))
    return grad


def link_points(world_joint_positions: np.ndarray, points_per_link: int) -> np.ndarray:
    """Evenly spaced samples along each link segment.

    Input rows are the inertial positions of joint frames 1..n and the end
    effector.  Each of the n segments contributes points_per_link samples at
    fractions k / points_per_link for k = 0..points_per_link - 1, so a
    segment includes its near joint and stops short of the far one (which
    the next segment supplies).
    """
    pts = np.asarray(world_joint_positions, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
        raise DimensionMismatch("world_joint_positions must be (n+1, 3)")
    fracs = np.arange(points_per_link) / points_per_link
    start = pts[:-1]
    span = pts[1:] - pts[:-1]
    out = start[:, None, :] + fracs[None, :, None] * span[:, None, :]
    return out.reshape(-1, 3)


def _parse_inertia(raw, label: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.shape == (3,):
        return np.diag(arr)
    if arr.shape == (3, 3):
        return arr
    raise SchemaMismatch(f"{label}: inertia must be a 3-list (diagonal) or 3x3 matrix")


def load_model(path: str | Path) -> ManipulatorModel:
    """Read a manipulator definition from its YAML description."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigInvalid(f"model file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise SchemaMismatch(f"model file {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise SchemaMismatch(f"model file {path} must contain a mapping")
    version = raw.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise SchemaMismatch(
            f"model schema_version {version!r} not supported (expected {MODEL_SCHEMA_VERSION})"
        )
    try:
        joints = raw["joints"]
        base = raw["base"]
        ee = raw["end_effector"]
        links = raw["links"]
    except KeyError as exc:
        raise SchemaMismatch(f"model file missing section {exc}") from None
    if len(links) != len(joints):
        raise SchemaMismatch("model must define exactly one link per joint")

    screws = np.zeros((len(joints), 6))
    zero_poses = []
    for i, joint in enumerate(joints):
        axis = np.asarray(joint["axis"], dtype=float)
        origin = np.asarray(joint["origin"], dtype=float)
        norm = np.linalg.norm(axis)
        if abs(norm - 1.0) > 1e-9:
            raise ConfigInvalid(f"joint {i + 1}: axis must be unit length")
        screws[i, :3] = -np.cross(axis, origin)
        screws[i, 3:] = axis
        zero_poses.append(Pose(Rotation.identity(), origin))
    zero_poses.append(Pose(Rotation.identity(), np.asarray(ee["position"], dtype=float)))

    def body(raw_body, label):
        return BodyInertia(
            mass=float(raw_body["mass"]),
            com=np.asarray(raw_body["com"], dtype=float),
            inertia=_parse_inertia(raw_body["inertia"], label),
        )

    model = ManipulatorModel(
        name=str(raw.get("name", path.stem)),
        screw_axes=screws,
        zero_poses=tuple(zero_poses),
        base_inertia=body(base, "base"),
        link_inertias=tuple(body(link, f"link {i + 1}") for i, link in enumerate(links)),
        points_per_link=int(raw.get("points_per_link", 4)),
        nominal_config=np.asarray(raw["nominal_config"], dtype=float),
        workspace_center=np.asarray(
            raw.get("workspace", {}).get("center", [0.0, 0.0, 0.0]), dtype=float
        ),
    )
    model.validate()
    return model


def builtin_model_path(name: str) -> Path:
    """Path of a model description shipped inside the package."""
    here = Path(__file__).resolve().parent
    candidate = here / "data" / f"{name}.yaml"
    if not candidate.exists():
        raise ConfigInvalid(f"no built-in model named {name!r}")
    return candidate
