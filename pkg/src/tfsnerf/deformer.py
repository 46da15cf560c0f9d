"""View-to-canonical deformation: affine-coupling INN + skinning-weight network.

A view-space point is first pulled back by the rigid transform of its nearest
posed joint, refined by a pose-conditioned coupling network, and finally
re-canonicalized with the inverse of the LBS blend under predicted weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .geometry import (
    SkeletonFrame,
    blend_transforms,
    broyden_inverse_lbs,
    canonical_init,
    lbs_forward,
    nearest_joint_index,
)

# condition number above which the blended 3x3 is treated as singular
DEGENERATE_COND = 1e8


def _mlp(sizes: list[int], act=nn.ReLU) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class CouplingBlock(nn.Module):
    """Affine coupling over 3 coordinates; ``passive`` is a 0/1 mask of the conditioning coordinates."""

    def __init__(self, passive, cond_dim: int, width: int = 512, proj_dim: int = 256, scale_bound: float = 2.0):
        super().__init__()
        self.register_buffer("passive", torch.tensor(passive, dtype=torch.get_default_dtype()))
        self.scale_bound = scale_bound
        self.proj = nn.Linear(3, proj_dim)
        in_dim = 3 + proj_dim + cond_dim
        self.scale_net = _mlp([in_dim, width, width, 3])
        self.trans_net = _mlp([in_dim, width, width, 3])
        for net in (self.scale_net, self.trans_net):
            nn.init.zeros_(net[-1].weight)
            nn.init.zeros_(net[-1].bias)

    def _st(self, x: torch.Tensor, cond: torch.Tensor):
        xp = x * self.passive
        h = torch.cat([xp, self.proj(xp), cond.expand(x.shape[0], -1)], dim=-1)
        active = 1.0 - self.passive
        s = self.scale_bound * torch.tanh(self.scale_net(h)) * active
        t = self.trans_net(h) * active
        if not (torch.isfinite(s).all() and torch.isfinite(t).all()):
            raise FloatingPointError("non-finite activations in coupling scale/translation subnet")
        return s, t

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        s, t = self._st(x, cond)
        return x * torch.exp(s) + t

    def inverse(self, y: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # passive coordinates are unchanged, so s and t can be recomputed from y
        s, t = self._st(y, cond)
        return (y - t) * torch.exp(-s)


class CouplingINN(nn.Module):
    """Two pose-conditioned affine coupling blocks (z | xy, then xy | z)."""

    def __init__(self, n_b: int, width: int = 512, proj_dim: int = 256, learned_init: bool = False):
        super().__init__()
        self.n_b = n_b
        cond_dim = 3 * n_b
        self.blocks = nn.ModuleList(
            [
                CouplingBlock([1.0, 1.0, 0.0], cond_dim, width, proj_dim),
                CouplingBlock([0.0, 0.0, 1.0], cond_dim, width, proj_dim),
            ]
        )
        # ablation: learn the starting point instead of using the nearest-joint pull-back
        self.init_net = None
        if learned_init:
            self.init_net = _mlp([3 + cond_dim, width // 2, width // 2, 3])
            nn.init.zeros_(self.init_net[-1].weight)
            nn.init.zeros_(self.init_net[-1].bias)

    def to_canonical(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x, cond)
        return x

    def to_view(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        for blk in reversed(self.blocks):
            x = blk.inverse(x, cond)
        return x


class SkinningNet(nn.Module):
    def __init__(self, n_b: int, width: int = 256):
        super().__init__()
        self.n_b = n_b
        self.net = _mlp([3, width, width, n_b])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(x), dim=-1)


@dataclass
class DeformationResult:
    x_c_prime: torch.Tensor
    w_s: torch.Tensor
    x_c: torch.Tensor
    valid: torch.Tensor
    bone_idx: torch.Tensor | None = None


def _cond(skel: SkeletonFrame, like: torch.Tensor) -> torch.Tensor:
    return skel.pose_vector(like)[None]


def initial_point(x_v: torch.Tensor, skel: SkeletonFrame, net: CouplingINN):
    """Starting point of the coupling pass plus the selected bone (None for the learned init)."""
    if net.init_net is not None:
        cond = _cond(skel, x_v).expand(x_v.shape[0], -1)
        return x_v + net.init_net(torch.cat([x_v, cond], dim=-1)), None
    idx = nearest_joint_index(x_v, skel)
    return canonical_init(x_v, skel, idx), idx


def inn_inverse_map(x_v: torch.Tensor, skel: SkeletonFrame, net: CouplingINN, return_bones: bool = False):
    single = x_v.dim() == 1
    x = x_v[None] if single else x_v
    x_init, idx = initial_point(x, skel, net)
    out = net.to_canonical(x_init, _cond(skel, x))
    out = out[0] if single else out
    return (out, idx) if return_bones else out


def _consistent_bone(x_init: torch.Tensor, skel: SkeletonFrame) -> torch.Tensor:
    """Lowest bone k whose transform sends ``x_init`` to a point nearest posed joint k."""
    B = skel.matrices(x_init)
    cand = torch.einsum("bij,nj->nbi", B[:, :3, :3], x_init) + B[None, :, :3, 3]
    J = skel.joints(True, x_init)
    d2 = ((cand[:, :, None, :] - J[None, None]) ** 2).sum(-1)
    ok = torch.argmin(d2, dim=-1) == torch.arange(skel.n_b, device=x_init.device)[None]
    J0 = skel.joints(False, x_init)
    fallback = torch.argmin(((x_init[:, None] - J0[None]) ** 2).sum(-1), dim=-1)
    first = torch.where(ok.any(-1), ok.float().argmax(-1), fallback)
    return first


def inn_forward_map(
    x_c: torch.Tensor, skel: SkeletonFrame, net: CouplingINN, bone_idx: torch.Tensor | None = None
) -> torch.Tensor:
    """Canonical -> view: inverse coupling pass, then the rigid blend undone by the initializer.

    ``bone_idx`` (as returned by ``inn_inverse_map(..., return_bones=True)``)
    pins the blend; without it the lowest self-consistent bone is used. With
    a learned initializer only the coupling stack is inverted.
    """
    single = x_c.dim() == 1
    x = x_c[None] if single else x_c
    x_init = net.to_view(x, _cond(skel, x))
    if net.init_net is not None:
        out = x_init
    else:
        if bone_idx is None:
            bone_idx = _consistent_bone(x_init, skel)
        B = skel.matrices(x)[bone_idx.reshape(-1)]
        out = torch.einsum("nij,nj->ni", B[:, :3, :3], x_init) + B[:, :3, 3]
    return out[0] if single else out


def predict_skinning(x_c_prime: torch.Tensor, net: SkinningNet) -> torch.Tensor:
    return net(x_c_prime)


def blended_inverse(w: torch.Tensor, skel: SkeletonFrame, x_v: torch.Tensor):
    """x_c = (Σ w_b B_b)^{-1} x_v; returns (x_c, valid) with ill-conditioned blends flagged."""
    M = blend_transforms(w, skel)
    A, t = M[:, :3, :3], M[:, :3, 3]
    with torch.no_grad():
        cond = torch.linalg.cond(A)
        valid = torch.isfinite(cond) & (cond <= DEGENERATE_COND)
    eye = torch.eye(3, dtype=A.dtype, device=A.device).expand_as(A)
    A_safe = torch.where(valid[:, None, None], A, eye)
    x_c = torch.linalg.solve(A_safe, (x_v - t).unsqueeze(-1)).squeeze(-1)
    return x_c, valid


def canonicalize(x_v: torch.Tensor, skel: SkeletonFrame, inn: CouplingINN, snet: SkinningNet) -> DeformationResult:
    x_c_prime, idx = inn_inverse_map(x_v, skel, inn, return_bones=True)
    w_s = predict_skinning(x_c_prime, snet)
    x_c, valid = blended_inverse(w_s, skel, x_v)
    x_c = torch.where(valid[:, None], x_c, x_c_prime)
    return DeformationResult(x_c_prime, w_s, x_c, valid, idx)


def _lbs_jacobian(snet: SkinningNet, skel: SkeletonFrame, x: torch.Tensor) -> torch.Tensor:
    with torch.enable_grad():
        x = x.detach().requires_grad_(True)
        f = lbs_forward(snet(x), skel, x)
        rows = [torch.autograd.grad(f[:, i].sum(), x, retain_graph=i < 2)[0] for i in range(3)]
    return torch.stack(rows, dim=1)


def broyden_multi_start(
    x_v: torch.Tensor,
    weight_field,
    skel: SkeletonFrame,
    tol: float = 1e-5,
    max_iter: int = 50,
    init: str = "bones",
):
    """Broyden inverse LBS started from every bone's rigid inverse; keep the lowest residual.

    ``init="nearest"`` uses the single nearest-joint start instead.
    """
    if init == "nearest":
        return broyden_inverse_lbs(x_v, weight_field, skel, None, tol, max_iter)
    if init != "bones":
        raise ValueError(f"unknown Broyden initialization {init!r}")
    n, n_b = x_v.shape[0], skel.n_b
    starts = torch.cat([canonical_init(x_v, skel, torch.full((n,), b, dtype=torch.long)) for b in range(n_b)])
    targets = x_v.repeat(n_b, 1)
    xs, res, its = broyden_inverse_lbs(targets, weight_field, skel, starts, tol, max_iter)
    res = res.reshape(n_b, n)
    best = res.argmin(0)
    cols = torch.arange(n)
    return xs.reshape(n_b, n, 3)[best, cols], res[best, cols], its.reshape(n_b, n).max(0).values


def canonicalize_broyden(
    x_v: torch.Tensor,
    skel: SkeletonFrame,
    snet: SkinningNet,
    tol: float = 1e-5,
    max_iter: int = 50,
    init: str = "bones",
) -> DeformationResult:
    """Root-finding canonicalizer: solve LBS(w(x_c), B, x_c) = x_v against the current skinning net.

    Gradients reach the skinning net through the implicit-function correction
    x_c - J^{-1}(LBS(x_c) - x_v) with J detached.
    """
    with torch.no_grad():
        x_star, _, _ = broyden_multi_start(x_v.detach(), snet, skel, tol, max_iter, init)
    J = _lbs_jacobian(snet, skel, x_star)
    with torch.no_grad():
        det = torch.linalg.det(J)
        valid = torch.isfinite(x_star).all(-1) & (det.abs() > 1e-8)
        J_inv = torch.linalg.inv(torch.where(valid[:, None, None], J, torch.eye(3, dtype=J.dtype).expand_as(J)))
    f = lbs_forward(snet(x_star), skel, x_star) - x_v
    x_c = x_star - torch.einsum("nij,nj->ni", J_inv, f)
    w_s = snet(x_c)
    return DeformationResult(x_c, w_s, x_c, valid, None)
