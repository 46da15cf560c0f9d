"""Optimization loop, checkpoints and the INN-vs-Broyden timing benchmark."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .evaluation import EmptyMeshError, Mesh, MeshSource, compute_metrics
from .fields import ENTITIES
from .losses import (
    TERM_NAMES,
    CapsuleCloud,
    LossReport,
    LossWeights,
    inshape_radius,
    loss_consistency,
    loss_cycle,
    loss_eikonal,
    loss_inshape,
    loss_pose,
    loss_rgb,
    loss_skinning,
    loss_total,
)
from .model import ModelConfig, TFSModel
from .rendering import BranchSamples, RayBatch, composite_render, ray_aabb, semantic_ray_sample, stratified_points
from .scene import Dataset, dataset_hash, load_dataset

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", *TERM_NAMES, "total", "wall_s"]
BENCH_COLUMNS = ["backend", "step", "wall_s", "chamfer_cm"]


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 5.0e-4
    betas: tuple = (0.9, 0.999)
    rays_per_entity: int = 512
    samples_per_ray: int = 64
    steps: int = 20000
    seed: int = 0
    backend: str = "inn"
    checkpoint_every: int = 1000
    bone_samples: int = 512
    cycle_points: int = 512
    dilation: int = 16
    near: float = 0.1
    far: float = 10.0
    broyden_tol: float = 1e-5
    broyden_max_iter: int = 50
    broyden_init: str = "bones"  # one start per bone, or "nearest"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    semantic_weight: float = 1.0  # shared-geometry ablation only

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        if self.broyden_init not in ("bones", "nearest"):
            raise ValueError(f"broyden_init must be 'bones' or 'nearest', got {self.broyden_init!r}")
        if self.backend not in ("inn", "broyden"):
            raise ValueError(f"backend must be 'inn' or 'broyden', got {self.backend!r}")
        for name in ("rays_per_entity", "samples_per_ray", "bone_samples", "cycle_points", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def skeleton_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    for t in range(ds.n_frames):
        h.update((ds.root / "frames" / f"{t:04d}" / "skel.json").read_bytes())
    return h.hexdigest()


def save_checkpoint(path: Path, model: TFSModel, cfg: TrainConfig, step: int, skel_hash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"model": model.state_dict(), "config": cfg.to_dict(), "step": step, "skeleton_hash": skel_hash, "version": __version__},
        path,
    )


def load_checkpoint(path, dataset: Dataset) -> tuple[TFSModel, TrainConfig, dict]:
    ck = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(ck["config"])
    model = build_model(dataset, cfg)
    model.load_state_dict(ck["model"])
    if ck.get("skeleton_hash") and ck["skeleton_hash"] != skeleton_hash(dataset):
        logger.warning("checkpoint was trained against a different skeleton sequence")
    return model, cfg, ck


def build_model(dataset: Dataset, cfg: TrainConfig) -> TFSModel:
    canonical = {e: dataset.canonical_skeleton(e) for e in ENTITIES}
    return TFSModel(canonical, cfg.model)


class Trainer:
    """One optimization run; ``step()`` performs a single logical training step."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset):
        self.cfg = cfg
        self.ds = dataset
        torch.manual_seed(cfg.seed)
        self.model = build_model(dataset, cfg)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_idx = 0
        self.history: dict[int, dict] = {}
        self.images = {(t, c): dataset.image(t, c) for t in range(dataset.n_frames) for c in range(len(dataset.cameras))}
        self.masks = {(t, c): dataset.mask(t, c) for t in range(dataset.n_frames) for c in range(len(dataset.cameras))}
        ref = dataset.canonical_skeleton(ENTITIES[0]).mean_bone_length()
        self.clouds = {}
        for e in ENTITIES:
            sk = self.model.canonical_skeleton(e) if not cfg.model.shared_geometry else dataset.canonical_skeleton(e)
            self.clouds[e] = CapsuleCloud(sk, inshape_radius(sk, ref))
        self.dtype = next(self.model.parameters()).dtype

    # ----- ray bookkeeping

    def _rays(self, t: int, c: int, step: int):
        cam = self.ds.cameras[c]
        img, mask = self.images[(t, c)], self.masks[(t, c)]
        hist = self.history.setdefault(c, {})
        seed = self.cfg.seed * 1_000_003 + step
        rd, rnd = semantic_ray_sample(
            img, mask, cam, self.cfg.rays_per_entity, seed, hist, self.cfg.dilation, bounds=self.ds.bounds,
            near=self.cfg.near, far=self.cfg.far, dtype=self.dtype,
        )
        W = cam.width
        lin = [b.pixels[:, 1] * W + b.pixels[:, 0] for b in (rd, rnd)]
        uniq, inv = np.unique(np.concatenate(lin), return_inverse=True)
        present = {}
        for k, e in enumerate(ENTITIES):
            p = np.zeros(len(uniq), dtype=bool)
            sl = inv[: len(lin[0])] if k == 0 else inv[len(lin[0]) :]
            p[sl] = True
            present[e] = torch.as_tensor(p)
        pix = np.stack([uniq % W, uniq // W], 1)
        o, d = cam.pixel_rays(pix)
        n, f = ray_aabb(o, d, *self.ds.bounds, self.cfg.near, self.cfg.far)
        flat = img.reshape(-1, 3).astype(np.float64) / 255.0
        lab = mask.reshape(-1)[uniq]
        batch = RayBatch(
            torch.as_tensor(o, dtype=self.dtype), torch.as_tensor(d, dtype=self.dtype), pix, "union",
            torch.as_tensor(flat[uniq], dtype=self.dtype), torch.as_tensor(n, dtype=self.dtype), torch.as_tensor(f, dtype=self.dtype),
        )
        return batch, present, lab

    def compute_losses(self, t: int, c: int, step: int) -> tuple[LossReport, dict]:
        cfg, model = self.cfg, self.model
        skels = self.ds.skels[t]
        batch, present, labels = self._rays(t, c, step)
        U, S = len(batch), cfg.samples_per_ray
        broyden_opts = {"tol": cfg.broyden_tol, "max_iter": cfg.broyden_max_iter, "init": cfg.broyden_init}
        eik = cfg.loss_weights.use_eikonal

        branches, evals = {}, {}
        for k, e in enumerate(ENTITIES):
            depths, pts = stratified_points(batch, S, seed=cfg.seed * 7919 + 2 * step + k)
            rows = present[e]
            density = torch.zeros(U, S, dtype=self.dtype)
            rgb = torch.zeros(U, S, 3, dtype=self.dtype)
            if rows.any():
                x_v = pts[rows].reshape(-1, 3)
                ev = model.evaluate_points(e, x_v, skels, cfg.backend, create_graph=True, broyden_opts=broyden_opts, eikonal=eik)
                valid = ev["result"].valid.reshape(-1, S)
                dens = ev["density"].reshape(-1, S) * valid.to(self.dtype)
                density = density.index_put((rows.nonzero().squeeze(-1),), dens)
                rgb = rgb.index_put((rows.nonzero().squeeze(-1),), ev["rgb"].reshape(-1, S, 3))
                evals[e] = ev
            branches[e] = BranchSamples(depths, density, rgb, rows)
        render = composite_render(branches)

        terms = {name: torch.zeros((), dtype=self.dtype) for name in TERM_NAMES}
        terms["l_rgb"] = loss_rgb(render.rgb, batch.target_rgb)
        seen_branches = set()
        for e in ENTITIES:
            br = model.branch(e)
            skel = model.frame_skeleton(e, skels)
            if id(br) not in seen_branches:
                seen_branches.add(id(br))
                if cfg.backend == "broyden":
                    canon = lambda x, skel=skel, e=e: model.deform(e, x, skel, "broyden", broyden_opts).x_c
                    terms["l_pose"] = terms["l_pose"] + loss_pose(br.inn, skel, cfg.bone_samples, step, canonicalizer=canon)
                else:
                    terms["l_pose"] = terms["l_pose"] + loss_pose(br.inn, skel, cfg.bone_samples, step)
                terms["l_w"] = terms["l_w"] + loss_skinning(br.snet, model.canonical_skeleton(e))
            if e not in evals:
                continue
            ev = evals[e]
            if cfg.backend == "inn":
                x_v_sub = _subsample(batch, present[e], S, cfg.cycle_points, step)
                terms["l_inn"] = terms["l_inn"] + loss_cycle(br.inn, skel, x_v_sub)
                terms["l_consis"] = terms["l_consis"] + loss_consistency(ev["result"])
            rows = present[e]
            terms["l_shape"] = terms["l_shape"] + loss_inshape(ev["x_c"].reshape(-1, S, 3), render.entity_opacity[e][rows], self.clouds[e])
            if eik:
                terms["l_eik"] = terms.get("l_eik", 0.0) + loss_eikonal(ev["grad"])

        if cfg.model.shared_geometry:
            terms["l_sem"] = self._semantic_loss(evals, present, render, labels, U, S)
        if cfg.model.shared_geometry:
            # the fixed six-term report plus the ablation's semantic term
            rep = loss_total({k: v for k, v in terms.items() if k != "l_sem"}, cfg.loss_weights)
            rep.total = rep.total + cfg.semantic_weight * terms["l_sem"]
            rep.terms["l_sem"] = terms["l_sem"]
        else:
            rep = loss_total(terms, cfg.loss_weights)
        return rep, {"render": render, "present": present}

    def _semantic_loss(self, evals, present, render, labels, U, S):
        beta = self.model.density.get_beta().detach()
        probs = []
        for e in ENTITIES:
            p = torch.zeros(U, S, len(ENTITIES), dtype=self.dtype)
            if e in evals:
                pe = torch.softmax(-evals[e]["sdf_all"] / beta, dim=-1).reshape(-1, S, len(ENTITIES))
                p = p.index_put((present[e].nonzero().squeeze(-1),), pe)
            probs.append(render.entity_weights[e][..., None] * p)
        sem = sum(pr.sum(1) for pr in probs)  # (U, n_entities)
        lab = torch.as_tensor(labels, dtype=torch.long)
        fg = lab > 0
        if not bool(fg.any()):
            return torch.zeros((), dtype=self.dtype)
        target = lab[fg] - 1
        s = sem[fg].clamp_min(1e-6)
        s = s / s.sum(-1, keepdim=True)
        return torch.nn.functional.nll_loss(torch.log(s), target)

    def step(self) -> LossReport:
        t = int(self.rng.integers(self.ds.n_frames))
        c = int(self.rng.integers(len(self.ds.cameras)))
        self.opt.zero_grad(set_to_none=True)
        rep, _ = self.compute_losses(t, c, self.step_idx)
        if not torch.isfinite(rep.total):
            raise TrainingAborted(self.step_idx, "non-finite loss")
        rep.total.backward()
        self.opt.step()
        self.step_idx += 1
        return rep


def _subsample(batch: RayBatch, rows: torch.Tensor, S: int, n: int, step: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(step)
    o, d = batch.origins[rows], batch.directions[rows]
    r = torch.randint(0, len(o), (n,), generator=gen)
    u = torch.rand(n, generator=gen, dtype=o.dtype)
    depth = batch.near[rows][r] + u * (batch.far[rows][r] - batch.near[rows][r])
    return o[r] + depth[:, None] * d[r]


# ---------------------------------------------------------------------------
# runs


def write_manifest(out: Path, cfg: TrainConfig, dataset: Dataset, extra: dict | None = None) -> dict:
    manifest = {
        "config": cfg.to_dict(),
        "code_version": __version__,
        "seeds": {"train": cfg.seed, "dataset": dataset.meta.get("seed")},
        "dataset": str(dataset.root),
        "dataset_hash": dataset_hash(dataset.root),
        "outputs": {"log": "train_log.csv", "checkpoints": "checkpoints/"},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "deviations": (["optional eikonal term enabled"] if cfg.loss_weights.use_eikonal else []),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def train(cfg: TrainConfig, dataset_path, out_dir, log_every: int = 50) -> dict:
    """Train end to end; writes manifest, log CSV and checkpoints under ``out_dir``."""
    ds = load_dataset(dataset_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, ds)
    trainer = Trainer(cfg, ds)
    shash = skeleton_hash(ds)
    ck_dir = out / "checkpoints"
    save_checkpoint(ck_dir / "step_000000.pt", trainer.model, cfg, 0, shash)
    last_good = ck_dir / "step_000000.pt"
    t0 = time.perf_counter()
    status = {"steps_done": 0, "aborted_at": None, "last_checkpoint": str(last_good)}
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for s in range(cfg.steps):
            try:
                rep = trainer.step()
            except TrainingAborted as exc:
                status["aborted_at"] = exc.step
                logger.error("training aborted: %s (last finite checkpoint %s)", exc, last_good)
                break
            row = {"step": s, **rep.as_row(), "wall_s": time.perf_counter() - t0}
            w.writerow(row)
            if s % log_every == 0:
                fh.flush()
                logger.info("step %d total %.4f rgb %.4f", s, row["total"], row["l_rgb"])
            if (s + 1) % cfg.checkpoint_every == 0 or s + 1 == cfg.steps:
                last_good = ck_dir / f"step_{s + 1:06d}.pt"
                save_checkpoint(last_good, trainer.model, cfg, s + 1, shash)
            status["steps_done"] = s + 1
    status["last_checkpoint"] = str(last_good)
    (out / "status.json").write_text(json.dumps(status, indent=2))
    if status["aborted_at"] is not None:
        raise TrainingAborted(status["aborted_at"], f"non-finite loss; last finite checkpoint {last_good}")
    return status


def read_log(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"training log {path} is empty")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


# ---------------------------------------------------------------------------
# benchmark


def chamfer_now(model: TFSModel, ds: Dataset, frames: Sequence[int], resolution: int, n_points: int, seed: int = 0) -> float:
    """Mean per-entity Chamfer (cm) over ``frames``; inf when a mesh cannot be extracted."""
    src = MeshSource(model, resolution=resolution)
    vals = []
    for e in ENTITIES:
        try:
            src.canonical(e)
        except EmptyMeshError:
            return float("inf")
        for t in frames:
            pred = src.posed(e, t, ds.skels[t])
            gt = Mesh.load(ds.gt_mesh_path(e, t))
            vals.append(compute_metrics(pred, gt, n_points, seed=seed).chamfer)
    return float(np.mean(vals))


def bench_backends(
    cfg: TrainConfig,
    dataset_path,
    wall_budget: float,
    eval_every: int = 100,
    eval_frames: Sequence[int] = (0,),
    eval_resolution: int = 64,
    eval_points: int = 2000,
    backends: Sequence[str] = ("inn", "broyden"),
    max_steps: int | None = None,
) -> dict:
    """Chamfer-vs-wall-clock curves per backend with identical seeds.

    Each backend gets ``wall_budget`` seconds of training time; evaluation time
    is excluded from the clock. Curves cut off by the budget are flagged partial.
    """
    ds = load_dataset(dataset_path)
    rows, summary = [], {}
    for label_idx, backend in enumerate(backends):
        bcfg = TrainConfig.from_dict({**cfg.to_dict(), "backend": backend})
        trainer = Trainer(bcfg, ds)
        label = backend if list(backends).count(backend) == 1 else f"{backend}#{label_idx}"
        wall, step, step_times = 0.0, 0, []
        rows.append({"backend": label, "step": 0, "wall_s": 0.0, "chamfer_cm": chamfer_now(trainer.model, ds, eval_frames, eval_resolution, eval_points)})
        limit = max_steps if max_steps is not None else bcfg.steps
        partial = False
        while step < limit:
            if wall >= wall_budget:
                partial = True
                break
            t0 = time.perf_counter()
            trainer.step()
            dt = time.perf_counter() - t0
            wall += dt
            step_times.append(dt)
            step += 1
            if step % eval_every == 0:
                rows.append({"backend": label, "step": step, "wall_s": wall, "chamfer_cm": chamfer_now(trainer.model, ds, eval_frames, eval_resolution, eval_points)})
        if rows[-1]["step"] != step:
            rows.append({"backend": label, "step": step, "wall_s": wall, "chamfer_cm": chamfer_now(trainer.model, ds, eval_frames, eval_resolution, eval_points)})
        summary[label] = {
            "steps": step,
            "wall_s": wall,
            "mean_step_s": float(np.mean(step_times)) if step_times else float("nan"),
            "partial": partial,
        }
    return {"rows": rows, "summary": summary}


def time_to_threshold(rows: Sequence[dict], backend: str, threshold: float) -> float | None:
    for r in rows:
        if r["backend"] == backend and r["chamfer_cm"] <= threshold:
            return r["wall_s"]
    return None
