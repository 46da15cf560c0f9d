"""Independent reference implementations used to check the package.

Each oracle is written from the definition, in plain numpy loops or
elementwise arithmetic, without calling into the code it checks.
"""
from __future__ import annotations

import numpy as np
import torch


# ---------------------------------------------------------------------------
# geometry


def nearest_joint_bruteforce(x, joints) -> int:
    best, best_d = 0, np.inf
    for k, j in enumerate(joints):
        d = float(np.sum((np.asarray(x) - np.asarray(j)) ** 2))
        if d < best_d:
            best, best_d = k, d
    return best


def lbs_point(w, mats, x) -> np.ndarray:
    """Blend 4x4 matrices one bone at a time and apply to a homogeneous point."""
    M = np.zeros((4, 4))
    for b, wb in enumerate(w):
        M += wb * np.asarray(mats[b])
    return (M @ np.append(x, 1.0))[:3]


def segment_distance(p, a, b) -> float:
    p, a, b = map(np.asarray, (p, a, b))
    ab = b - a
    t = 0.0 if ab @ ab == 0 else min(max(((p - a) @ ab) / (ab @ ab), 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


# ---------------------------------------------------------------------------
# rendering


def volume_render_plain(depths, sigma, rgb):
    """Textbook quadrature for one ray, written as an explicit loop."""
    n = len(depths)
    T, out, acc, weights = 1.0, np.zeros(3), 0.0, []
    for i in range(n):
        delta = depths[i + 1] - depths[i] if i + 1 < n else depths[i] - depths[i - 1]
        a = 1.0 - np.exp(-sigma[i] * delta)
        w = T * a
        out += w * np.asarray(rgb[i])
        acc += w
        weights.append(w)
        T *= 1.0 - a
    return out, acc, np.array(weights)


def moller_trumbore(orig, d, v0, v1, v2, eps=1e-12):
    """Ray/triangle distance along ``d`` or None."""
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < eps:
        return None
    inv = 1.0 / det
    s = orig - v0
    u = (s @ p) * inv
    if u < 0.0 or u > 1.0:
        return None
    q = np.cross(s, e1)
    v = (d @ q) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2 @ q) * inv
    return t if t > eps else None


def raycast_label(orig, d, meshes, labels):
    """Label of the front-most triangle hit across meshes (0 when nothing is hit), vectorized over triangles."""
    best_t, best_lab = np.inf, 0
    for (V, F), lab in zip(meshes, labels):
        v0, v1, v2 = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
        e1, e2 = v1 - v0, v2 - v0
        p = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, p)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = orig - v0
        u = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1)
        v = (q @ d) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        if hit.any():
            tm = t[hit].min()
            if tm < best_t:
                best_t, best_lab = tm, lab
    return best_lab, best_t


# ---------------------------------------------------------------------------
# metrics


def metrics_bruteforce(pred: np.ndarray, gt: np.ndarray, threshold_cm: float = 5.0, unit_cm: float = 100.0) -> dict:
    """Quadratic all-pairs distances; returns the six metrics."""
    D = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1)) * unit_cm
    d_pg = D.min(axis=1)
    d_gp = D.min(axis=0)
    acc, comp = d_pg.mean(), d_gp.mean()
    prec = 100.0 * np.mean(d_pg < threshold_cm)
    rec = 100.0 * np.mean(d_gp < threshold_cm)
    f = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    return {
        "dist_acc": acc,
        "completeness": comp,
        "precision": prec,
        "recall": rec,
        "f_score": f,
        "chamfer": 0.5 * (acc + comp),
    }


# ---------------------------------------------------------------------------
# finite differences


def fd_param_check(loss_fn, params, h=1e-6, per_tensor=6, seed=0):
    """Relative error between autograd and central differences on sampled parameter entries.

    ``loss_fn()`` must rebuild the scalar from the current parameter values.
    Returns (max relative error over the sampled vector, number of entries checked).
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    ad, fd = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for i in picks:
                old = flat[i].item()
                flat[i] = old + h
                fp = float(loss_fn())
                flat[i] = old - h
                fm = float(loss_fn())
                flat[i] = old
                fd.append((fp - fm) / (2 * h))
                ad.append(0.0 if g is None else float(g.view(-1)[i]))
    ad, fd = np.array(ad), np.array(fd)
    scale = max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(ad - fd) / scale), len(ad)


def fd_input_grad(fn, x, h=1e-4):
    """Central-difference gradient of a scalar field at each row of x (N, 3)."""
    out = np.zeros(x.shape)
    with torch.no_grad():
        for k in range(3):
            e = torch.zeros_like(x)
            e[:, k] = h
            out[:, k] = ((fn(x + e) - fn(x - e)) / (2 * h)).numpy()
    return out
