"""Cameras, semantic ray sampling, SDF density and depth-merged compositing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .fields import ENTITIES

logger = logging.getLogger(__name__)

MASK_LABELS = {"background": 0, "deformable": 1, "non-deformable": 2}


@dataclass
class Camera:
    intrinsics: np.ndarray
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        K = self.intrinsics
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsics must be invertible with positive focal lengths")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), focal: float = 300.0, width: int = 256, height: int = 256):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera x, y, z axes in world
        K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def pixel_rays(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space (origins, unit directions) through pixel centers; pixels are (col, row)."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        homog = np.concatenate([pixels + 0.5, np.ones((len(pixels), 1))], axis=1)
        d_cam = homog @ np.linalg.inv(self.intrinsics).T
        d = d_cam @ self.rotation
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.repeat(self.center[None], len(d), axis=0), d

    def project(self, points: np.ndarray) -> np.ndarray:
        pc = np.asarray(points) @ self.rotation.T + self.translation
        uv = pc @ self.intrinsics.T
        return uv[:, :2] / uv[:, 2:3]

    def to_json(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Camera":
        return cls(d["intrinsics"], d["rotation"], d["translation"], int(d["width"]), int(d["height"]))


@dataclass
class RayBatch:
    origins: torch.Tensor
    directions: torch.Tensor
    pixels: np.ndarray  # (R, 2) as (col, row)
    entity: str
    target_rgb: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    notes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.origins.shape[0])


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (R, 3)
    alpha: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, S_total), merged depth order
    depths: torch.Tensor  # (R, S_total)
    entity_opacity: dict[str, torch.Tensor]
    entity_weights: dict[str, torch.Tensor] = field(default_factory=dict)  # per-branch, own sample order


def ray_aabb(origins: np.ndarray, dirs: np.ndarray, lo, hi, near: float, far: float):
    """Clip [near, far] to a box; rays that miss keep the default interval."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(axis=1)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(axis=1)
    n = np.maximum(tmin, near)
    f = np.minimum(tmax, far)
    miss = ~(f > n + 1e-6)
    n[miss], f[miss] = near, far
    return n, f


def dilation_band(region: np.ndarray, radius: int) -> np.ndarray:
    """Pixels within ``radius`` of ``region`` but outside it."""
    if not region.any():
        return np.zeros_like(region, dtype=bool)
    dist = ndimage.distance_transform_edt(~region)
    return (dist <= radius) & ~region


def _pick(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros((0,), dtype=np.int64)
    return rng.choice(pool, size=n, replace=len(pool) < n)


def semantic_ray_sample(
    image: np.ndarray,
    mask: np.ndarray,
    cam: Camera,
    n_rays_per_entity: int,
    seed: int,
    history: dict | None = None,
    dilation: int = 16,
    inside_frac: float = 0.8,
    bounds=None,
    near: float = 0.1,
    far: float = 10.0,
    dtype=None,
) -> tuple[RayBatch, RayBatch]:
    """Draw one ray batch per entity from the entity mask and its dilation band.

    ``history`` (mutated in place) keeps the last mask seen for each entity and
    is used when the entity is absent from the current frame.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.shape[:2] != image.shape[:2]:
        raise ValueError("mask resolution must match the image")
    H, W = mask.shape[:2]
    if (H, W) != (cam.height, cam.width):
        raise ValueError("image resolution must match the camera")
    rng = np.random.default_rng(seed)
    dtype = dtype or torch.get_default_dtype()
    flat_img = image.reshape(H * W, -1)[:, :3].astype(np.float64)
    if flat_img.max() > 1.0:
        flat_img = flat_img / 255.0

    batches = []
    for ent in ENTITIES:
        region = mask == MASK_LABELS[ent]
        notes: list[str] = []
        if region.any():
            if history is not None:
                history[ent] = region
            band = dilation_band(region, dilation)
            n_in = int(round(inside_frac * n_rays_per_entity)) if band.any() else n_rays_per_entity
            idx = np.concatenate(
                [
                    _pick(rng, np.flatnonzero(region), n_in),
                    _pick(rng, np.flatnonzero(band), n_rays_per_entity - n_in),
                ]
            )
        else:
            band = np.zeros((H, W), dtype=bool)
            if history is not None and ent in history:
                band = dilation_band(history[ent], dilation)
                notes.append("absent: sampled band around last known region")
            if not band.any():
                others = [mask == MASK_LABELS[o] for o in ENTITIES if o != ent]
                band = np.zeros((H, W), dtype=bool)
                for o in others:
                    band |= dilation_band(o, dilation)
                if band.any():
                    notes.append("absent: sampled band around other entities")
            if not band.any():
                band = np.ones((H, W), dtype=bool)
                notes.append("absent with no history: uniform over image")
                logger.warning("entity %s absent with no history; sampling uniformly", ent)
            idx = _pick(rng, np.flatnonzero(band), n_rays_per_entity)

        pix = np.stack([idx % W, idx // W], axis=1)
        o, d = cam.pixel_rays(pix)
        if bounds is not None:
            n_arr, f_arr = ray_aabb(o, d, bounds[0], bounds[1], near, far)
        else:
            n_arr, f_arr = np.full(len(o), near), np.full(len(o), far)
        batches.append(
            RayBatch(
                origins=torch.as_tensor(o, dtype=dtype),
                directions=torch.as_tensor(d, dtype=dtype),
                pixels=pix,
                entity=ent,
                target_rgb=torch.as_tensor(flat_img[idx], dtype=dtype),
                near=torch.as_tensor(n_arr, dtype=dtype),
                far=torch.as_tensor(f_arr, dtype=dtype),
                notes=notes,
            )
        )
    return batches[0], batches[1]


def stratified_points(batch: RayBatch, n_samples: int, seed: int | None = None, jitter: bool = True):
    """One depth per equal stratum of [near, far]; returns (depths (R,S), points (R,S,3))."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    R = len(batch)
    near, far = batch.near[:, None], batch.far[:, None]
    u = torch.arange(n_samples, dtype=near.dtype)[None]
    if jitter:
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        u = u + torch.rand(R, n_samples, generator=gen, dtype=near.dtype)
    else:
        u = u + 0.5
    depths = near + (far - near) * u / n_samples
    pts = batch.origins[:, None, :] + depths[..., None] * batch.directions[:, None, :]
    return depths, pts


def sdf_to_density(sdf: torch.Tensor, beta, alpha_scale=None) -> torch.Tensor:
    """alpha_scale * LaplaceCDF_beta(-sdf); alpha_scale defaults to 1/beta."""
    beta = torch.as_tensor(beta, dtype=sdf.dtype)
    if (beta <= 0).any():
        raise ValueError("beta must be positive")
    if alpha_scale is None:
        alpha_scale = 1.0 / beta
    return alpha_scale * (0.5 + 0.5 * sdf.sign() * torch.expm1(-sdf.abs() / beta))


class LaplaceDensity(nn.Module):
    def __init__(self, beta_init: float = 0.1, beta_min: float = 1e-4):
        super().__init__()
        self.beta = nn.Parameter(torch.tensor(beta_init))
        self.beta_min = beta_min

    def get_beta(self) -> torch.Tensor:
        return self.beta.abs() + self.beta_min

    def forward(self, sdf: torch.Tensor) -> torch.Tensor:
        return sdf_to_density(sdf, self.get_beta())


def _deltas(depths: torch.Tensor) -> torch.Tensor:
    d = depths[:, 1:] - depths[:, :-1]
    return torch.cat([d, d[:, -1:]], dim=1)


@dataclass
class BranchSamples:
    """Per-ray samples of one entity branch; rays where ``present`` is False contribute nothing."""

    depths: torch.Tensor  # (R, S)
    density: torch.Tensor  # (R, S)
    rgb: torch.Tensor  # (R, S, 3)
    present: torch.Tensor | None = None  # (R,)


def composite_render(branches: Mapping[str, BranchSamples]) -> RenderOutput:
    """Merge all branches' samples along each ray by depth and alpha-composite them.

    Each sample keeps the interval length of its own branch's stratification.
    Ties in depth are ordered by entity tag, so the result does not depend on
    the mapping's iteration order.
    """
    names = sorted(branches)
    depths, alphas, colors, tags = [], [], [], []
    for k, name in enumerate(names):
        b = branches[name]
        if (b.depths[:, 1:] < b.depths[:, :-1]).any():
            raise ValueError(f"branch {name} has non-monotone depths")
        a = 1.0 - torch.exp(-b.density * _deltas(b.depths))
        if b.present is not None:
            a = a * b.present[:, None].to(a)
        depths.append(b.depths)
        alphas.append(a)
        colors.append(b.rgb)
        tags.append(torch.full_like(b.depths, float(k)))
    D = torch.cat(depths, 1)
    A = torch.cat(alphas, 1)
    C = torch.cat(colors, 1)
    tag = torch.cat(tags, 1)
    # lexicographic (depth, tag) order via two stable sorts
    o1 = torch.sort(tag, dim=1, stable=True).indices
    D1 = torch.gather(D, 1, o1)
    o2 = torch.sort(D1, dim=1, stable=True).indices
    order = torch.gather(o1, 1, o2)
    D = torch.gather(D, 1, order)
    if (D[:, 1:] < D[:, :-1]).any():
        raise ValueError("merged depths are not monotone")
    A = torch.gather(A, 1, order)
    C = torch.gather(C, 1, order[..., None].expand(-1, -1, 3))
    tag = torch.gather(tag, 1, order)

    trans = torch.cumprod(torch.cat([torch.ones_like(A[:, :1]), 1.0 - A[:, :-1] + 1e-10], 1), 1)
    w = trans * A
    rgb = (w[..., None] * C).sum(1)
    alpha = w.sum(1)
    opacity = {name: (w * (tag == k)).sum(1) for k, name in enumerate(names)}
    # per-branch weights scattered back to each branch's own sample order
    inv = torch.empty_like(order)
    inv.scatter_(1, order, torch.arange(order.shape[1], device=order.device).expand_as(order).contiguous())
    w_orig = torch.gather(w, 1, inv)
    ent_w, start = {}, 0
    for name in names:
        S = branches[name].depths.shape[1]
        ent_w[name] = w_orig[:, start : start + S]
        start += S
    return RenderOutput(rgb, alpha, w, D, opacity, ent_w)
