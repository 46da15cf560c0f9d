"""Canonical-space fields: frequency encoding, per-entity SDF heads, radiance head."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

ENTITIES = ("deformable", "non-deformable")


class FrequencyEncoding(nn.Module):
    """x -> [x, sin(2^k pi x), cos(2^k pi x)] for k < n_freq (39 dims for 6 octaves)."""

    def __init__(self, n_freq: int = 6):
        super().__init__()
        self.n_freq = n_freq

    @property
    def out_dim(self) -> int:
        return 3 + 3 * 2 * self.n_freq

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        freqs = (2.0 ** torch.arange(self.n_freq, dtype=x.dtype, device=x.device)) * np.pi
        xf = x[..., None, :] * freqs[:, None]  # (..., n_freq, 3)
        enc = torch.stack([torch.sin(xf), torch.cos(xf)], dim=-2)  # (..., n_freq, 2, 3)
        return torch.cat([x, enc.flatten(-3)], dim=-1)


def frequency_encode(x: torch.Tensor, n_freq: int = 6) -> torch.Tensor:
    return FrequencyEncoding(n_freq).to(x)(x)


def semantic_point_weights(x_c: torch.Tensor, skels: Sequence, sigma: float) -> torch.Tensor:
    """Soft entity membership (ω_d, ω_nd, ω_bg) from distance to each canonical skeleton.

    ``skels`` holds one (n_b, 3) canonical joint array or SkeletonFrame per entity.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    single = x_c.dim() == 1
    x = x_c[None] if single else x_c
    omegas = []
    for s in skels:
        J = s.joints(False, x) if hasattr(s, "joints") else torch.as_tensor(s, dtype=x.dtype, device=x.device)
        d2 = ((x[:, None, :] - J[None]) ** 2).sum(-1).min(dim=1).values
        omegas.append(torch.exp(-d2 / sigma**2))
    w = torch.stack(omegas, dim=-1)
    bg = 1.0 - torch.clamp(w.sum(-1, keepdim=True), max=1.0)
    out = torch.cat([w, bg], dim=-1)
    return out[0] if single else out


class SdfHead(nn.Module):
    """8-layer softplus MLP with a skip that re-injects the encoded point at layer 4.

    Input: encoded point (39) + flattened canonical joints (3·n_b) + semantic
    weights (3). Output: SDF (1) + geometry feature. The SDF is a learned
    residual on top of a sphere of radius ``init_radius`` around ``center``,
    so an untrained head is exactly that sphere.
    """

    def __init__(
        self,
        n_b: int,
        width: int = 256,
        n_layers: int = 8,
        skip: int = 4,
        feat_dim: int = 256,
        n_freq: int = 6,
        init_radius: float = 0.3,
        center: Sequence[float] = (0.0, 0.0, 0.0),
        n_sdf: int = 1,
    ):
        super().__init__()
        self.n_b = n_b
        self.encoding = FrequencyEncoding(n_freq)
        self.enc_dim = self.encoding.out_dim
        self.in_dim = self.enc_dim + 3 * n_b + 3
        self.skip = skip
        self.n_sdf = n_sdf
        self.feat_dim = feat_dim
        self.register_buffer("center", torch.tensor(center, dtype=torch.get_default_dtype()))
        self.act = nn.Softplus(beta=100)

        outs = [width] * (n_layers - 1) + [n_sdf + feat_dim]
        # narrow the pre-skip layer so the skip concat restores the width; tiny test nets just grow
        outs[skip - 1] = width - self.enc_dim if width > self.enc_dim else width
        ins = [self.in_dim] + outs[:-1]
        ins[skip] = outs[skip - 1] + self.enc_dim
        self.layers = nn.ModuleList([nn.Linear(i, o) for i, o in zip(ins, outs)])
        self.init_radius = float(init_radius)
        self._geometric_init(init_radius)

    def _geometric_init(self, radius: float) -> None:
        last = len(self.layers) - 1
        for l, lin in enumerate(self.layers):
            out_dim = lin.out_features
            with torch.no_grad():
                if l == last:
                    nn.init.normal_(lin.weight, mean=np.sqrt(np.pi) / np.sqrt(lin.in_features), std=1e-4)
                    nn.init.zeros_(lin.bias)
                    # SDF rows start at zero: the sphere term in forward() carries the initial shape
                    lin.weight[: self.n_sdf] = 0.0
                else:
                    nn.init.normal_(lin.weight, 0.0, np.sqrt(2) / np.sqrt(out_dim))
                    nn.init.zeros_(lin.bias)
                    if l == 0:
                        lin.weight[:, 3:] = 0.0
                    elif l == self.skip:
                        lin.weight[:, -(self.enc_dim - 3):] = 0.0

    def assemble(self, x_c: torch.Tensor, joints: torch.Tensor, sem: torch.Tensor) -> torch.Tensor:
        enc = self.encoding(x_c - self.center.to(x_c))
        J = joints.reshape(1, -1).to(x_c).expand(x_c.shape[0], -1)
        inp = torch.cat([enc, J, sem], dim=-1)
        if inp.shape[-1] != self.in_dim:
            raise ValueError(f"SDF head expects {self.in_dim} inputs, got {inp.shape[-1]}")
        return inp

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        enc = inp[:, : self.enc_dim]
        h = inp
        last = len(self.layers) - 1
        for l, lin in enumerate(self.layers):
            if l == self.skip:
                h = torch.cat([h, enc], dim=-1) / np.sqrt(2)
            h = lin(h)
            if l < last:
                h = self.act(h)
        # analytic sphere prior around the entity centre; the first 3 encoding channels are x - center
        r = torch.sqrt((enc[:, :3] ** 2).sum(-1, keepdim=True) + 1e-12)
        return torch.cat([h[:, : self.n_sdf] + (r - self.init_radius), h[:, self.n_sdf :]], dim=-1)


def sdf_eval(entity: str, x_c: torch.Tensor, skel, sem: torch.Tensor, head: SdfHead):
    """Return (sdf, feature) for canonical points of one entity."""
    if entity not in ENTITIES:
        raise ValueError(f"unknown entity {entity!r}")
    single = x_c.dim() == 1
    x = x_c[None] if single else x_c
    s = sem[None] if sem.dim() == 1 else sem
    J = skel.joints(False, x) if hasattr(skel, "joints") else torch.as_tensor(skel).to(x)
    out = head(head.assemble(x, J, s))
    sdf, feat = out[:, 0], out[:, head.n_sdf :]
    if single:
        return sdf[0], feat[0]
    return sdf, feat


def sdf_normal(entity, x_c, skel, sem, head, create_graph: bool = False):
    """Unit SDF gradient at x_c; returns (normal, sdf, feat, degenerate).

    Degenerate points (gradient norm < 1e-8) get +z.
    """
    with torch.enable_grad():
        x = x_c if x_c.requires_grad else x_c.detach().requires_grad_(True)
        sdf, feat = sdf_eval(entity, x, skel, sem, head)
        (grad,) = torch.autograd.grad(sdf.sum(), x, create_graph=create_graph)
    norm = grad.norm(dim=-1, keepdim=True)
    degenerate = norm.squeeze(-1) < 1e-8
    plus_z = torch.zeros_like(grad)
    plus_z[..., 2] = 1.0
    normal = torch.where(degenerate[..., None], plus_z, grad / norm.clamp_min(1e-8))
    return normal, sdf, feat, degenerate


def sdf_gradient(head: SdfHead, entity, x_c, skel, sem, create_graph: bool = True):
    """Raw (unnormalized) SDF gradient, used by the optional eikonal term."""
    with torch.enable_grad():
        x = x_c if x_c.requires_grad else x_c.detach().requires_grad_(True)
        sdf, _ = sdf_eval(entity, x, skel, sem, head)
        (grad,) = torch.autograd.grad(sdf.sum(), x, create_graph=create_graph)
    return grad


class RgbHead(nn.Module):
    """Unified radiance MLP over [x_c, normal, compressed pose, geometry feature]."""

    def __init__(self, pose_dim: int, width: int = 256, feat_dim: int = 256, n_p: int = 8):
        super().__init__()
        self.pose_proj = nn.Linear(pose_dim, n_p)
        self.in_dim = 3 + 3 + n_p + feat_dim
        sizes = [self.in_dim, width, width, width, width, 3]
        layers: list[nn.Module] = []
        for i in range(len(sizes) - 1):
            layers.append(nn.Linear(sizes[i], sizes[i + 1]))
            if i < len(sizes) - 2:
                layers.append(nn.ReLU())
        self.mlp = nn.Sequential(*layers)

    def assemble(self, x_c, normal, feat, poses) -> torch.Tensor:
        p = self.pose_proj(poses.reshape(1, -1).to(x_c)).expand(x_c.shape[0], -1)
        inp = torch.cat([x_c, normal, p, feat], dim=-1)
        if inp.shape[-1] != self.in_dim:
            raise ValueError(f"RGB head expects {self.in_dim} inputs, got {inp.shape[-1]}")
        return inp

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(inp))


def rgb_eval(x_c, normal, feat, poses, head: RgbHead) -> torch.Tensor:
    single = x_c.dim() == 1
    if single:
        x_c, normal, feat = x_c[None], normal[None], feat[None]
    rgb = head(head.assemble(x_c, normal, feat, poses))
    return rgb[0] if single else rgb
