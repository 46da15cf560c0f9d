"""Training objectives and their weighted total."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .deformer import CouplingINN, DeformationResult, SkinningNet, inn_forward_map, inn_inverse_map
from .geometry import SkeletonFrame, bone_segments, sample_bone_points

TERM_NAMES = ("l_rgb", "l_pose", "l_w", "l_inn", "l_consis", "l_shape")


@dataclass
class LossWeights:
    skel: float = 2.0
    w: float = 10.0
    inn: float = 1.0
    consis: float = 1.0
    shape: float = 0.03
    # not one of the six paper terms; runs with it enabled are flagged in reports
    eikonal: float = 0.1
    use_eikonal: bool = False

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "use_eikonal" and v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")

    def coefficients(self) -> dict[str, float]:
        c = {
            "l_rgb": 1.0,
            "l_pose": self.skel,
            "l_w": self.w,
            "l_inn": self.inn,
            "l_consis": self.consis,
            "l_shape": self.shape,
        }
        if self.use_eikonal:
            c["l_eik"] = self.eikonal
        return c


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor]
    total: torch.Tensor
    weights: dict[str, float] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        row = {k: _scalar(self.terms.get(k, 0.0)) for k in TERM_NAMES}
        for extra in ("l_eik", "l_sem"):
            if extra in self.terms:
                row[extra] = _scalar(self.terms[extra])
        row["total"] = _scalar(self.total)
        return row


def loss_rgb(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the L1 norm of the color error."""
    if rendered.shape != target.shape:
        raise ValueError("rendered and target batches differ in shape")
    return (rendered - target).abs().sum(-1).mean()


def loss_pose(
    inn: CouplingINN,
    skel: SkeletonFrame,
    P: int,
    seed: int,
    radius: float | None = None,
    canonicalizer=None,
) -> torch.Tensor:
    """Mean L1 distance between canonical bone samples and mapped posed bone samples.

    ``canonicalizer(x_v) -> x_c`` replaces the INN pull-back (root-finding backend).
    """
    x_can = sample_bone_points(skel, False, P, radius, seed)
    x_pos = sample_bone_points(skel, True, P, radius, seed)
    like = next(inn.parameters()) if inn is not None else torch.empty(0)
    x_can = torch.as_tensor(x_can, dtype=like.dtype)
    x_pos = torch.as_tensor(x_pos, dtype=like.dtype)
    mapped = canonicalizer(x_pos) if canonicalizer is not None else inn_inverse_map(x_pos, skel, inn)
    return (x_can - mapped).abs().sum(-1).mean()


def loss_skinning(snet: SkinningNet, skel: SkeletonFrame) -> torch.Tensor:
    """Mean squared error between predicted weights at each canonical joint and its one-hot."""
    J0 = skel.joints(False, next(snet.parameters()))
    w = snet(J0)
    target = torch.eye(skel.n_b, dtype=w.dtype, device=w.device)
    return ((w - target) ** 2).sum(-1).mean()


def loss_cycle(
    inn: CouplingINN, skel: SkeletonFrame, x_v: torch.Tensor, forward_inn: CouplingINN | None = None
) -> torch.Tensor:
    """Round trip view -> canonical -> view, both directions conditioned on the frame pose.

    ``forward_inn`` supplies a separately parameterized return pass.
    """
    x_c, idx = inn_inverse_map(x_v, skel, inn, return_bones=True)
    back = inn_forward_map(x_c, skel, forward_inn or inn, idx)
    return ((back - x_v) ** 2).sum(-1).mean()


def loss_consistency(results: DeformationResult) -> torch.Tensor:
    d = ((results.x_c_prime - results.x_c) ** 2).sum(-1)
    v = results.valid
    if v is not None and not bool(v.all()):
        if not bool(v.any()):
            return d.sum() * 0.0
        d = d[v]
    return d.mean()


class CapsuleCloud:
    """Union of capsules of radius ``radius`` around the canonical bones (a ball for single joints)."""

    def __init__(self, skel: SkeletonFrame, radius: float):
        self.radius = float(radius)
        J = skel.canonical_joints
        segs = bone_segments(skel)
        if segs:
            self.a = np.array([J[p] for p, _ in segs])
            self.b = np.array([J[c] for _, c in segs])
        else:
            self.a = J[:1].copy()
            self.b = J[:1].copy()

    def distance(self, pts: torch.Tensor) -> torch.Tensor:
        a = torch.as_tensor(self.a, dtype=pts.dtype)
        b = torch.as_tensor(self.b, dtype=pts.dtype)
        ab = b - a
        denom = (ab * ab).sum(-1).clamp_min(1e-12)
        ap = pts[..., None, :] - a
        t = ((ap * ab).sum(-1) / denom).clamp(0.0, 1.0)
        d = (ap - t[..., None] * ab).norm(dim=-1)
        return d.min(-1).values

    def contains(self, pts: torch.Tensor) -> torch.Tensor:
        return self.distance(pts) <= self.radius


def inshape_radius(skel: SkeletonFrame, reference_length: float | None = None) -> float:
    """15% of mean bone length; single-joint skeletons borrow ``reference_length``."""
    L = skel.mean_bone_length()
    if L == 0.0:
        L = reference_length or 0.1
    return 0.15 * L


def loss_inshape(x_c_rays: torch.Tensor, alpha: torch.Tensor, init_cloud: CapsuleCloud) -> torch.Tensor:
    """BCE toward alpha = 1 on rays with at least one canonical sample inside the init cloud.

    ``x_c_rays`` is (R, S, 3); ``alpha`` is (R,).
    """
    with torch.no_grad():
        qualify = init_cloud.contains(x_c_rays.detach()).any(-1)
    if not bool(qualify.any()):
        return alpha.sum() * 0.0
    a = alpha[qualify].clamp(1e-6, 1.0)
    return -torch.log(a).mean()


def loss_eikonal(grad: torch.Tensor) -> torch.Tensor:
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def loss_total(terms: dict[str, torch.Tensor], weights: LossWeights | None = None) -> LossReport:
    weights = weights or LossWeights()
    coef = weights.coefficients()
    total = None
    for k, c in coef.items():
        if k not in terms:
            continue
        contrib = c * terms[k]
        total = contrib if total is None else total + contrib
    if total is None:
        total = 0.0
    return LossReport(dict(terms), total, coef)
