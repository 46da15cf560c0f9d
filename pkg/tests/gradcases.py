"""Width-8 float64 setups for finite-difference checks of every loss and both field heads.

Each case is (loss_fn, params); ``loss_fn()`` rebuilds the scalar from the
current parameter values.
"""
from __future__ import annotations

import numpy as np
import torch

from conftest import CHAIN_JOINTS, posed_chain
from tfsnerf.deformer import CouplingINN, SkinningNet, canonicalize
from tfsnerf.fields import RgbHead, SdfHead
from tfsnerf.losses import CapsuleCloud, loss_consistency, loss_cycle, loss_inshape, loss_pose, loss_rgb, loss_skinning
from tfsnerf.rendering import BranchSamples, composite_render, sdf_to_density

D64 = torch.float64


def randomize(net: torch.nn.Module, std: float = 0.3, seed: int = 0) -> torch.nn.Module:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return net


def gradient_cases(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    sk = posed_chain(rng, 0.5)
    cases = {}

    rgb = randomize(RgbHead(3 * 4, width=8, feat_dim=8).double(), seed=seed + 1)
    x = torch.randn(6, 3, generator=gen, dtype=D64) * 0.3
    nrm = torch.nn.functional.normalize(torch.randn(6, 3, generator=gen, dtype=D64), dim=-1)
    feat = torch.randn(6, 8, generator=gen, dtype=D64)
    poses = sk.pose_vector(dtype=D64)
    target = torch.rand(6, 3, generator=gen, dtype=D64)
    cases["l_rgb"] = (lambda: loss_rgb(rgb(rgb.assemble(x, nrm, feat, poses)), target), list(rgb.parameters()))

    inn = randomize(CouplingINN(4, 8, 8).double(), std=0.2, seed=seed + 2)
    cases["l_pose"] = (lambda: loss_pose(inn, sk, 32, seed), list(inn.parameters()))

    snet = randomize(SkinningNet(4, 8).double(), std=0.5, seed=seed + 3)
    cases["l_w"] = (lambda: loss_skinning(snet, sk), list(snet.parameters()))

    fwd = randomize(CouplingINN(4, 8, 8).double(), std=0.2, seed=seed + 4)
    x_v = torch.tensor(sk.posed_joints) + torch.randn(4, 3, generator=gen, dtype=D64) * 0.05
    cases["l_inn"] = (lambda: loss_cycle(inn, sk, x_v, forward_inn=fwd), list(inn.parameters()) + list(fwd.parameters()))

    cases["l_consis"] = (
        lambda: loss_consistency(canonicalize(x_v, sk, inn, snet)),
        list(inn.parameters()) + list(snet.parameters()),
    )

    sdf = SdfHead(4, width=8, feat_dim=8, center=CHAIN_JOINTS.mean(0)).double()
    randomize(sdf, std=0.05, seed=seed + 5)
    J = torch.tensor(CHAIN_JOINTS)
    depths = torch.linspace(0.2, 1.2, 10, dtype=D64).expand(5, -1).contiguous()
    origins = torch.tensor(CHAIN_JOINTS.mean(0)) + torch.tensor([0.0, -0.7, 0.0], dtype=D64)
    dirs = torch.nn.functional.normalize(torch.tensor([[0.0, 1.0, 0.0]], dtype=D64) + torch.randn(5, 3, generator=gen, dtype=D64) * 0.1, dim=-1)
    pts = origins + depths[..., None] * dirs[:, None, :]
    sem = torch.rand(50, 3, generator=gen, dtype=D64)
    cloud = CapsuleCloud(sk, 0.1)

    def inshape():
        s = sdf(sdf.assemble(pts.reshape(-1, 3), J, sem))[:, 0].reshape(5, 10)
        rho = sdf_to_density(s, 0.5, alpha_scale=0.5)
        out = composite_render({"deformable": BranchSamples(depths, rho, torch.zeros(5, 10, 3, dtype=D64))})
        return loss_inshape(pts, out.alpha, cloud)

    cases["l_shape"] = (inshape, list(sdf.parameters()))

    probe = torch.randn(9, generator=gen, dtype=D64)
    cases["sdf_head"] = (lambda: (sdf(sdf.assemble(x, J, sem[:6])) * probe).sum(), list(sdf.parameters()))
    cases["rgb_head"] = (lambda: (rgb(rgb.assemble(x, nrm, feat, poses)) * probe[:3]).sum(), list(rgb.parameters()))
    return cases
