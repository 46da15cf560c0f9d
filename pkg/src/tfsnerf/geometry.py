"""Rigid transforms, skeletons, linear blend skinning and inverse-LBS solvers.

Skeleton data is stored as float64 numpy arrays; the skinning operators are
written in torch so they can sit inside autograd graphs. Every torch operator
accepts either a single 3-vector or a batch of shape (N, 3).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

__all__ = [
    "RigidTransform",
    "SkeletonFrame",
    "SolverDivergedError",
    "lbs_forward",
    "blend_transforms",
    "nearest_joint_onehot",
    "nearest_joint_index",
    "canonical_init",
    "broyden_inverse_lbs",
    "sample_bone_points",
    "default_bone_radius",
    "bone_segments",
    "skeletons_to_json",
    "skeletons_from_json",
    "rotation_matrix",
]


class SolverDivergedError(RuntimeError):
    def __init__(self, iteration: int, message: str = "non-finite Broyden iterate"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


def rotation_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass
class SkeletonFrame:
    """Per-frame articulation of one entity.

    ``bone_transforms`` has shape (n_b, 4, 4); transform b carries the
    canonical position of joint b onto its posed position.
    """

    parents: np.ndarray
    canonical_joints: np.ndarray
    posed_joints: np.ndarray
    bone_transforms: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        n_b = self.parents.shape[0]
        self.canonical_joints = np.asarray(self.canonical_joints, dtype=np.float64).reshape(n_b, 3)
        self.posed_joints = np.asarray(self.posed_joints, dtype=np.float64).reshape(n_b, 3)
        bt = np.asarray(self.bone_transforms, dtype=np.float64)
        if bt.shape == (n_b, 3, 4):
            bt = np.concatenate([bt, np.tile([[[0.0, 0.0, 0.0, 1.0]]], (n_b, 1, 1))], axis=1)
        self.bone_transforms = bt.reshape(n_b, 4, 4)
        if n_b < 1:
            raise ValueError("skeleton needs at least one bone")
        _check_forest(self.parents)
        self._cache: dict = {}

    @property
    def n_b(self) -> int:
        return int(self.parents.shape[0])

    @classmethod
    def rest(cls, parents, canonical_joints) -> "SkeletonFrame":
        """Skeleton in its canonical pose (all transforms identity)."""
        J = np.asarray(canonical_joints, dtype=np.float64)
        return cls(parents, J, J.copy(), np.tile(np.eye(4), (len(J), 1, 1)))

    @classmethod
    def from_transforms(cls, parents, canonical_joints, transforms: Sequence[RigidTransform]) -> "SkeletonFrame":
        J = np.asarray(canonical_joints, dtype=np.float64)
        mats = np.stack([T.matrix() for T in transforms])
        posed = np.einsum("bij,bj->bi", mats[:, :3, :3], J) + mats[:, :3, 3]
        return cls(parents, J, posed, mats)

    def transform(self, b: int) -> RigidTransform:
        return RigidTransform.from_matrix(self.bone_transforms[b])

    def validate(self, atol: float = 1e-5) -> None:
        for b in range(self.n_b):
            self.transform(b)  # orthonormality check
        mapped = np.einsum("bij,bj->bi", self.bone_transforms[:, :3, :3], self.canonical_joints)
        mapped += self.bone_transforms[:, :3, 3]
        err = np.abs(mapped - self.posed_joints).max()
        if err > atol:
            raise ValueError(f"bone transforms do not carry canonical joints to posed joints (max err {err:.3g})")

    def matrices(self, like: torch.Tensor | None = None, dtype=None, device=None) -> torch.Tensor:
        """Bone transforms as a cached torch tensor of shape (n_b, 4, 4)."""
        if like is not None:
            dtype, device = like.dtype, like.device
        dtype = dtype or torch.get_default_dtype()
        key = ("B", dtype, str(device))
        if key not in self._cache:
            self._cache[key] = torch.as_tensor(self.bone_transforms, dtype=dtype, device=device)
        return self._cache[key]

    def joints(self, posed: bool, like: torch.Tensor | None = None, dtype=None, device=None) -> torch.Tensor:
        if like is not None:
            dtype, device = like.dtype, like.device
        dtype = dtype or torch.get_default_dtype()
        key = ("Jp" if posed else "J0", dtype, str(device))
        if key not in self._cache:
            src = self.posed_joints if posed else self.canonical_joints
            self._cache[key] = torch.as_tensor(src, dtype=dtype, device=device)
        return self._cache[key]

    def pose_vector(self, like: torch.Tensor | None = None, dtype=None, device=None) -> torch.Tensor:
        """Flattened posed joints, length 3·n_b."""
        return self.joints(True, like, dtype, device).reshape(-1)

    def bbox_diagonal(self, posed: bool = False) -> float:
        J = self.posed_joints if posed else self.canonical_joints
        return float(np.linalg.norm(J.max(0) - J.min(0)))

    def mean_bone_length(self) -> float:
        segs = bone_segments(self)
        if not segs:
            return 0.0
        J = self.canonical_joints
        return float(np.mean([np.linalg.norm(J[c] - J[p]) for p, c in segs]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SkeletonFrame):
            return NotImplemented
        return (
            np.array_equal(self.parents, other.parents)
            and np.array_equal(self.canonical_joints, other.canonical_joints)
            and np.array_equal(self.posed_joints, other.posed_joints)
            and np.array_equal(self.bone_transforms, other.bone_transforms)
        )


def _check_forest(parents: np.ndarray) -> None:
    n = len(parents)
    for i, p in enumerate(parents):
        if p < -1 or p >= n:
            raise ValueError(f"parent index {p} of bone {i} out of range")
    for i in range(n):
        seen = set()
        j = i
        while j != -1:
            if j in seen:
                raise ValueError(f"parent indices contain a cycle through bone {i}")
            seen.add(j)
            j = int(parents[j])


def bone_segments(skel: SkeletonFrame) -> list[tuple[int, int]]:
    """(parent, child) joint pairs; the segment moves rigidly with the parent's transform."""
    return [(int(p), c) for c, p in enumerate(skel.parents) if p >= 0]


# ---------------------------------------------------------------------------
# skinning


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 1:
        return x.unsqueeze(0), True
    return x, False


def _matrices(skel, like: torch.Tensor) -> torch.Tensor:
    if isinstance(skel, SkeletonFrame):
        return skel.matrices(like)
    return skel.to(like)


def blend_transforms(w: torch.Tensor, skel) -> torch.Tensor:
    """Weighted sum of homogeneous bone matrices, (N, n_b) -> (N, 4, 4)."""
    B = _matrices(skel, w)
    if w.shape[-1] != B.shape[0]:
        raise ValueError(f"weight dimension {w.shape[-1]} does not match bone count {B.shape[0]}")
    return torch.einsum("nb,bij->nij", w, B)


def lbs_forward(w: torch.Tensor, skel, x_c: torch.Tensor) -> torch.Tensor:
    """Deform canonical points with blended bone transforms."""
    w_b, single = _as_batch(w)
    x_b, _ = _as_batch(x_c)
    M = blend_transforms(w_b, skel)
    out = torch.einsum("nij,nj->ni", M[:, :3, :3], x_b) + M[:, :3, 3]
    return out[0] if single else out


def nearest_joint_index(x_v: torch.Tensor, skel: SkeletonFrame) -> torch.Tensor:
    x_b, single = _as_batch(x_v)
    J = skel.joints(True, x_b)
    d2 = ((x_b[:, None, :] - J[None]) ** 2).sum(-1)
    # argmin returns the first minimum, which gives the lowest-index tie-break
    idx = torch.argmin(d2, dim=1)
    return idx[0] if single else idx


def nearest_joint_onehot(x_v: torch.Tensor, skel: SkeletonFrame) -> torch.Tensor:
    idx = nearest_joint_index(x_v, skel)
    return torch.nn.functional.one_hot(idx, skel.n_b).to(x_v.dtype)


def _apply_inverse_rigid(B: torch.Tensor, idx: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    R = B[idx, :3, :3]
    t = B[idx, :3, 3]
    return torch.einsum("nji,nj->ni", R, x - t)


def canonical_init(x_v: torch.Tensor, skel: SkeletonFrame, idx: torch.Tensor | None = None) -> torch.Tensor:
    """Undo the transform of the nearest posed joint.

    The one-hot blend is a single rigid transform, so its inverse is taken in
    closed form. ``idx`` overrides the nearest-joint selection.
    """
    x_b, single = _as_batch(x_v)
    if idx is None:
        idx = nearest_joint_index(x_b, skel)
    idx = idx.reshape(-1)
    out = _apply_inverse_rigid(_matrices(skel, x_b), idx, x_b)
    return out[0] if single else out


def broyden_inverse_lbs(
    x_v: torch.Tensor,
    weight_field: Callable[[torch.Tensor], torch.Tensor],
    skel: SkeletonFrame,
    x0: torch.Tensor | None = None,
    tol: float = 1e-5,
    max_iter: int = 50,
    reset_after: int = 5,
):
    """Solve ``lbs_forward(weight_field(x), skel, x) = x_v`` with Broyden's good method.

    Returns ``(x_c, residual, iters)`` per point; unconverged points return the
    best iterate seen. The inverse Jacobian starts from the inverse of the
    blended rotation at the current point and is reset there after
    ``reset_after`` consecutive residual increases.
    """
    x_v, single = _as_batch(x_v)
    if tol <= 0:
        raise ValueError("tol must be positive")
    with torch.no_grad():
        x = canonical_init(x_v, skel) if x0 is None else _as_batch(x0)[0].clone()
        if not torch.isfinite(x).all():
            raise ValueError("initial guess must be finite")
        x = x.clone()
        n = x.shape[0]

        def residual_fn(p, rows):
            return lbs_forward(weight_field(p), skel, p) - x_v[rows]

        def jac_inv(p):
            A = blend_transforms(weight_field(p), skel)[:, :3, :3]
            return torch.linalg.inv(A)

        g = residual_fn(x, slice(None))
        J_inv = jac_inv(x)
        gnorm = g.norm(dim=-1)
        best_x, best_norm = x.clone(), gnorm.clone()
        iters = torch.zeros(n, dtype=torch.long, device=x.device)
        increases = torch.zeros(n, dtype=torch.long, device=x.device)
        active = best_norm > tol

        for it in range(1, max_iter + 1):
            if not active.any():
                break
            a = active
            dx = -torch.einsum("nij,nj->ni", J_inv[a], g[a])
            x_new = x[a] + dx
            g_new = residual_fn(x_new, a)
            if not (torch.isfinite(x_new).all() and torch.isfinite(g_new).all()):
                raise SolverDivergedError(it)
            dg = g_new - g[a]
            # good Broyden update of the inverse Jacobian (Sherman-Morrison form)
            Jdg = torch.einsum("nij,nj->ni", J_inv[a], dg)
            vT = torch.einsum("ni,nij->nj", dx, J_inv[a])
            denom = (dx * Jdg).sum(-1, keepdim=True)
            denom = torch.where(denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
            J_new = J_inv[a] + ((dx - Jdg) / denom)[:, :, None] * vT[:, None, :]

            new_norm = g_new.norm(dim=-1)
            worse = new_norm > gnorm[a]
            inc = torch.where(worse, increases[a] + 1, torch.zeros_like(increases[a]))

            x[a], g[a], J_inv[a], gnorm[a] = x_new, g_new, J_new, new_norm
            iters[a] = it
            improved = new_norm < best_norm[a]
            idx_a = a.nonzero().squeeze(-1)
            upd = idx_a[improved]
            best_x[upd] = x_new[improved]
            best_norm[upd] = new_norm[improved]

            reset = idx_a[inc >= reset_after]
            inc[inc >= reset_after] = 0
            increases[a] = inc
            if reset.numel():
                x[reset] = best_x[reset]
                g[reset] = residual_fn(best_x[reset], reset)
                gnorm[reset] = g[reset].norm(dim=-1)
                J_inv[reset] = jac_inv(best_x[reset])
            active = best_norm > tol

    if single:
        return best_x[0], best_norm[0], iters[0]
    return best_x, best_norm, iters


# ---------------------------------------------------------------------------
# bone sampling


def default_bone_radius(skel: SkeletonFrame, min_radius: float = 0.02) -> float:
    """5% of the canonical joint bbox diagonal, floored for single-joint skeletons."""
    return max(0.05 * skel.bbox_diagonal(), min_radius)


def sample_bone_points(
    skel: SkeletonFrame,
    use_posed: bool,
    P: int,
    radius: float | None = None,
    seed: int = 0,
    at_midpoints: bool = False,
    return_bones: bool = False,
):
    """Sample P points along bone segments with Gaussian offsets.

    Segment choice, position along the segment and the offset (drawn in the
    canonical frame and rotated by the bone for the posed skeleton) depend only
    on the seed and the canonical skeleton, so a canonical/posed pair of calls
    with the same seed returns corresponding points.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    if radius is None:
        radius = default_bone_radius(skel)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    rng = np.random.default_rng(seed)
    segs = bone_segments(skel)
    J0 = skel.canonical_joints
    J = skel.posed_joints if use_posed else J0
    if segs:
        seg_par = np.array([p for p, _ in segs])
        seg_child = np.array([c for _, c in segs])
        if at_midpoints:
            choice = np.arange(P) % len(segs)
            s = np.full(P, 0.5)
        else:
            lengths = np.linalg.norm(J0[seg_child] - J0[seg_par], axis=1)
            prob = lengths / lengths.sum() if lengths.sum() > 0 else None
            choice = rng.choice(len(segs), size=P, p=prob)
            s = rng.random(P)
        par, child = seg_par[choice], seg_child[choice]
        base = J[par] + s[:, None] * (J[child] - J[par])
        bones = par
    else:
        bones = np.zeros(P, dtype=np.int64)
        base = np.repeat(J[:1], P, axis=0)
    eps = rng.normal(0.0, 1.0, size=(P, 3)) * radius
    if use_posed:
        eps = np.einsum("nij,nj->ni", skel.bone_transforms[bones, :3, :3], eps)
    pts = base + eps
    return (pts, bones) if return_bones else pts


# ---------------------------------------------------------------------------
# serialization


def skeletons_to_json(frames: Sequence[SkeletonFrame]) -> dict:
    """One entity's skeleton over a sequence of frames."""
    first = frames[0]
    return {
        "n_b": first.n_b,
        "parents": first.parents.tolist(),
        "canonical_joints": first.canonical_joints.tolist(),
        "posed_joints": [f.posed_joints.tolist() for f in frames],
        "bone_transforms": [f.bone_transforms[:, :3, :].reshape(f.n_b, 12).tolist() for f in frames],
    }


def skeletons_from_json(doc: dict | str) -> list[SkeletonFrame]:
    if isinstance(doc, str):
        doc = json.loads(doc)
    n_b = int(doc["n_b"])
    out = []
    for Jp, bt in zip(doc["posed_joints"], doc["bone_transforms"]):
        out.append(
            SkeletonFrame(
                doc["parents"],
                doc["canonical_joints"],
                Jp,
                np.asarray(bt, dtype=np.float64).reshape(n_b, 3, 4),
            )
        )
    return out
