"""Two-entity scene model: per-entity deformer + SDF head, shared radiance head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .deformer import CouplingINN, DeformationResult, SkinningNet, canonicalize, canonicalize_broyden
from .fields import ENTITIES, RgbHead, SdfHead, semantic_point_weights
from .geometry import SkeletonFrame
from .rendering import LaplaceDensity


@dataclass
class ModelConfig:
    inn_width: int = 512
    proj_dim: int = 256
    skin_width: int = 256
    sdf_width: int = 256
    sdf_layers: int = 8
    feat_dim: int = 256
    rgb_width: int = 256
    n_freq: int = 6
    sdf_init_radius: float = 0.3
    beta_init: float = 0.1
    sigma_frac: float = 0.1
    # ablations
    use_xinit: bool = True
    shared_geometry: bool = False


def _key(entity: str) -> str:
    return entity.replace("-", "_")


def union_skeleton(skels: dict[str, SkeletonFrame]) -> SkeletonFrame:
    """Both entities' bones in one skeleton (used by the shared-geometry variant)."""
    parts = [skels[e] for e in ENTITIES]
    offset, parents = 0, []
    for s in parts:
        parents.extend([p + offset if p >= 0 else -1 for p in s.parents])
        offset += s.n_b
    return SkeletonFrame(
        parents,
        np.concatenate([s.canonical_joints for s in parts]),
        np.concatenate([s.posed_joints for s in parts]),
        np.concatenate([s.bone_transforms for s in parts]),
    )


class EntityBranch(nn.Module):
    def __init__(self, entity: str, n_b: int, center, cfg: ModelConfig, n_sdf: int = 1):
        super().__init__()
        self.entity = entity
        self.inn = CouplingINN(n_b, cfg.inn_width, cfg.proj_dim, learned_init=not cfg.use_xinit)
        self.snet = SkinningNet(n_b, cfg.skin_width)
        self.sdf = SdfHead(
            n_b,
            cfg.sdf_width,
            cfg.sdf_layers,
            feat_dim=cfg.feat_dim,
            n_freq=cfg.n_freq,
            init_radius=cfg.sdf_init_radius,
            center=center,
            n_sdf=n_sdf,
        )


class TFSModel(nn.Module):
    """Holds everything trainable; evaluation helpers take per-frame skeletons explicitly."""

    def __init__(self, canonical: dict[str, SkeletonFrame], cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.canonical = canonical
        n_bs = {e: canonical[e].n_b for e in ENTITIES}
        if self.cfg.shared_geometry:
            u = union_skeleton(canonical)
            self.shared = EntityBranch("deformable", u.n_b, u.canonical_joints.mean(0), self.cfg, n_sdf=len(ENTITIES))
            self.branches = nn.ModuleDict()
        else:
            self.branches = nn.ModuleDict(
                {_key(e): EntityBranch(e, n_bs[e], canonical[e].canonical_joints.mean(0), self.cfg) for e in ENTITIES}
            )
        self.rgb = RgbHead(3 * sum(n_bs.values()), self.cfg.rgb_width, self.cfg.feat_dim)
        self.density = LaplaceDensity(self.cfg.beta_init)
        allJ = np.concatenate([canonical[e].canonical_joints for e in ENTITIES])
        self.sigma = self.cfg.sigma_frac * max(float(np.linalg.norm(allJ.max(0) - allJ.min(0))), 1e-3)

    # ----- plumbing

    def branch(self, entity: str) -> EntityBranch:
        return self.shared if self.cfg.shared_geometry else self.branches[_key(entity)]

    def sdf_channel(self, entity: str) -> int:
        return ENTITIES.index(entity) if self.cfg.shared_geometry else 0

    def frame_skeleton(self, entity: str, skels: dict[str, SkeletonFrame]) -> SkeletonFrame:
        return union_skeleton(skels) if self.cfg.shared_geometry else skels[entity]

    def canonical_skeleton(self, entity: str) -> SkeletonFrame:
        return union_skeleton(self.canonical) if self.cfg.shared_geometry else self.canonical[entity]

    def poses(self, skels: dict[str, SkeletonFrame], like: torch.Tensor) -> torch.Tensor:
        return torch.cat([skels[e].pose_vector(like) for e in ENTITIES])

    def semantics(self, x_c: torch.Tensor) -> torch.Tensor:
        return semantic_point_weights(x_c, [self.canonical[e] for e in ENTITIES], self.sigma)

    # ----- queries

    def canonical_sdf(self, entity: str, x_c: torch.Tensor) -> torch.Tensor:
        br = self.branch(entity)
        skel = self.canonical_skeleton(entity)
        sem = self.semantics(x_c)
        out = br.sdf(br.sdf.assemble(x_c, skel.joints(False, x_c), sem))
        return out[:, self.sdf_channel(entity)]

    def deform(self, entity: str, x_v: torch.Tensor, skel: SkeletonFrame, backend: str = "inn", broyden_opts=None):
        br = self.branch(entity)
        if backend == "inn":
            return canonicalize(x_v, skel, br.inn, br.snet)
        if backend == "broyden":
            return canonicalize_broyden(x_v, skel, br.snet, **(broyden_opts or {}))
        raise ValueError(f"unknown deformation backend {backend!r}")

    def evaluate_points(
        self,
        entity: str,
        x_v: torch.Tensor,
        skels: dict[str, SkeletonFrame],
        backend: str = "inn",
        create_graph: bool = True,
        broyden_opts=None,
        eikonal: bool = False,
    ) -> dict:
        """View-space points of one entity's rays -> density, color and deformation bookkeeping."""
        skel = self.frame_skeleton(entity, skels)
        res: DeformationResult = self.deform(entity, x_v, skel, backend, broyden_opts)
        br = self.branch(entity)
        x_c = res.x_c
        sem = self.semantics(x_c)
        cskel = self.canonical_skeleton(entity)
        with torch.enable_grad():
            xg = x_c if x_c.requires_grad else x_c.detach().requires_grad_(True)
            out = br.sdf(br.sdf.assemble(xg, cskel.joints(False, xg), sem))
            sdf_all = out[:, : br.sdf.n_sdf]
            feat = out[:, br.sdf.n_sdf :]
            sdf = sdf_all[:, self.sdf_channel(entity)]
            if self.cfg.shared_geometry:
                scene_sdf = sdf_all.min(-1).values
            else:
                scene_sdf = sdf
            (grad,) = torch.autograd.grad(scene_sdf.sum(), xg, create_graph=create_graph)
        gnorm = grad.norm(dim=-1, keepdim=True)
        degenerate = gnorm.squeeze(-1) < 1e-8
        plus_z = torch.zeros_like(grad)
        plus_z[:, 2] = 1.0
        normal = torch.where(degenerate[:, None], plus_z, grad / gnorm.clamp_min(1e-8))
        rgb = self.rgb(self.rgb.assemble(xg, normal, feat, self.poses(skels, xg)))
        density = self.density(scene_sdf)
        out = {
            "result": res,
            "sdf": scene_sdf,
            "sdf_all": sdf_all,
            "density": density,
            "rgb": rgb,
            "normal": normal,
            "x_c": xg,
        }
        if eikonal:
            out["grad"] = grad
        return out
