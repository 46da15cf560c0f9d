"""Procedural ground truth: an articulated capsule chain and a rigid box/sphere.

Everything here is analytic: SDFs, skinning weights, posed meshes (canonical
marching-cubes mesh deformed by LBS with the analytic weights) and rendered
RGB + semantic masks (z-buffer rasterization of the posed meshes).
"""
from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from skimage import measure

from .geometry import RigidTransform, SkeletonFrame, _check_forest, bone_segments, rotation_matrix, skeletons_from_json, skeletons_to_json
from .rendering import MASK_LABELS, Camera

DEFORMABLE, RIGID = "deformable", "non-deformable"
ENTITY_NAMES = (DEFORMABLE, RIGID)


@dataclass
class SceneSpec:
    n_bones: int = 4
    bone_length: float = 0.25
    capsule_radius: float | list = 0.06
    chain_base: tuple = (0.0, 0.0, 0.1)
    parents: list | None = None  # default: serial chain
    joint_offsets: list | None = None  # per joint, relative to parent; default straight up
    rigid_shape: str = "box"
    rigid_size: tuple = (0.1, 0.1, 0.1)  # half extents (box) or (radius,) (sphere)
    rigid_center: tuple = (0.45, -0.2, 0.45)
    color_deformable: tuple = (0.85, 0.35, 0.2)
    color_rigid: tuple = (0.2, 0.5, 0.9)
    # motion
    amplitude: float = 0.5
    cycles: float = 1.0
    rigid_motion: str = "handover"
    rigid_travel: float = 0.35
    rigid_spin: float = 1.2
    # capture
    frames: int = 50
    cams: int = 1
    resolution: int = 256
    focal: float = 560.0
    camera_distance: float = 3.0
    camera_target: tuple = (0.15, 0.0, 0.5)
    mesh_voxel: float = 0.01

    @classmethod
    def from_dict(cls, d: dict | None) -> "SceneSpec":
        d = dict(d or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class AnalyticScene:
    spec: SceneSpec
    parents: np.ndarray
    joints: np.ndarray  # canonical chain joints
    radii: np.ndarray  # per segment
    rigid_center: np.ndarray
    colors: dict = field(default_factory=dict)

    @property
    def segments(self) -> list[tuple[int, int]]:
        return [(int(p), c) for c, p in enumerate(self.parents) if p >= 0]

    def canonical_skeleton(self, entity: str) -> SkeletonFrame:
        if entity == DEFORMABLE:
            return SkeletonFrame.rest(self.parents, self.joints)
        return SkeletonFrame.rest([-1], self.rigid_center[None])

    # ---- analytic SDFs (canonical space)

    def chain_sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        d = np.full(p.shape[:-1], np.inf)
        for (a, b), r in zip(self.segments, self.radii):
            d = np.minimum(d, capsule_sdf(p, self.joints[a], self.joints[b], r))
        return d

    def rigid_sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.asarray(p, dtype=np.float64) - self.rigid_center
        if self.spec.rigid_shape == "sphere":
            return np.linalg.norm(q, axis=-1) - self.spec.rigid_size[0]
        return box_sdf(q, np.asarray(self.spec.rigid_size, dtype=np.float64))

    def sdf(self, entity: str, p: np.ndarray) -> np.ndarray:
        return self.chain_sdf(p) if entity == DEFORMABLE else self.rigid_sdf(p)

    def skinning_weights(self, p: np.ndarray) -> np.ndarray:
        """Normalized inverse-square distance to the two nearest segments, credited to each segment's bone."""
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        n_b = len(self.parents)
        segs = self.segments
        if not segs:
            return np.ones((len(p), n_b))
        d = np.stack([segment_distance(p, self.joints[a], self.joints[b]) for a, b in segs], axis=1)
        k = min(2, len(segs))
        near = np.argsort(d, axis=1, kind="stable")[:, :k]
        inv = 1.0 / (np.take_along_axis(d, near, 1) ** 2 + 1e-12)
        inv /= inv.sum(1, keepdims=True)
        owner = np.array([a for a, _ in segs])
        w = np.zeros((len(p), n_b))
        rows = np.arange(len(p))[:, None]
        np.add.at(w, (np.broadcast_to(rows, near.shape), owner[near]), inv)
        return w

    def bbox(self, entity: str, pad: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        if entity == DEFORMABLE:
            r = float(np.max(self.radii)) if len(self.radii) else 0.05
            lo, hi = self.joints.min(0) - r, self.joints.max(0) + r
        else:
            ext = np.asarray(self.spec.rigid_size, dtype=np.float64)
            ext = np.full(3, ext[0]) if self.spec.rigid_shape == "sphere" else ext
            half = np.full(3, np.linalg.norm(ext))
            lo, hi = self.rigid_center - half, self.rigid_center + half
        return lo - pad, hi + pad

    def canonical_mesh(self, entity: str, voxel: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        voxel = voxel or self.spec.mesh_voxel
        lo, hi = self.bbox(entity, pad=3 * voxel)
        return mesh_from_sdf(lambda q: self.sdf(entity, q), lo, hi, voxel)


def capsule_sdf(p, a, b, r):
    return segment_distance(p, a, b) - r


def segment_distance(p, a, b):
    ab = b - a
    ap = p - a
    t = np.clip((ap @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    return np.linalg.norm(ap - t[..., None] * ab, axis=-1)


def box_sdf(q, half):
    d = np.abs(q) - half
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(d.max(axis=-1), 0.0)
    return outside + inside


def mesh_from_sdf(fn, lo, hi, voxel) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    n = np.maximum(np.ceil((hi - lo) / voxel).astype(int) + 1, 2)
    axes = [lo[i] + voxel * np.arange(n[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vol = fn(grid.reshape(-1, 3)).reshape(grid.shape[:3])
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(voxel, voxel, voxel))
    return verts + lo, faces.astype(np.int64)


def build_scene(spec: SceneSpec | dict | None = None) -> AnalyticScene:
    spec = spec if isinstance(spec, SceneSpec) else SceneSpec.from_dict(spec)
    n = spec.n_bones
    if n < 1:
        raise ValueError("n_bones must be >= 1")
    parents = np.asarray(spec.parents if spec.parents is not None else [-1] + list(range(n - 1)), dtype=np.int64)
    if len(parents) != n:
        raise ValueError("parents length must equal n_bones")
    _check_forest(parents)
    offsets = (
        np.asarray(spec.joint_offsets, dtype=np.float64)
        if spec.joint_offsets is not None
        else np.tile([0.0, 0.0, spec.bone_length], (n, 1))
    )
    joints = np.zeros((n, 3))
    for k in _topological(parents):
        p = parents[k]
        joints[k] = np.asarray(spec.chain_base, dtype=np.float64) if p < 0 else joints[p] + offsets[k]
    n_seg = int((parents >= 0).sum())
    radii = np.broadcast_to(np.asarray(spec.capsule_radius, dtype=np.float64), (n_seg,)).copy()
    return AnalyticScene(
        spec=spec,
        parents=parents,
        joints=joints,
        radii=radii,
        rigid_center=np.asarray(spec.rigid_center, dtype=np.float64),
        colors={DEFORMABLE: np.asarray(spec.color_deformable), RIGID: np.asarray(spec.color_rigid)},
    )


def _topological(parents: np.ndarray) -> list[int]:
    order, placed = [], set()
    while len(order) < len(parents):
        for k, p in enumerate(parents):
            if k not in placed and (p < 0 or int(p) in placed):
                order.append(k)
                placed.add(k)
    return order


def _about(center: np.ndarray, R: np.ndarray) -> RigidTransform:
    return RigidTransform(R, center - R @ center)


def pose_sequence(scene: AnalyticScene, T: int, seed: int = 0, amplitude: float | None = None) -> list[dict[str, SkeletonFrame]]:
    """Per-frame skeletons for both entities.

    Each chain joint swings sinusoidally about a per-joint horizontal axis; the
    rigid entity slides toward the chain and back while spinning about z.
    """
    spec = scene.spec
    amp = spec.amplitude if amplitude is None else amplitude
    rng = np.random.default_rng(seed)
    n = len(scene.parents)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    az = rng.uniform(-0.4, 0.4, size=n)
    axes = np.stack([np.sin(az), np.cos(az), np.zeros(n)], axis=1)
    order = _topological(scene.parents)
    rigid_skel = scene.canonical_skeleton(RIGID)
    out = []
    for t in range(T):
        s = t / max(T, 1)
        local = [rotation_matrix(axes[k], amp * np.sin(2 * np.pi * spec.cycles * s + phases[k])) for k in range(n)]
        B: list[RigidTransform | None] = [None] * n
        for k in order:
            rot = _about(scene.joints[k], local[k])
            p = scene.parents[k]
            B[k] = rot if p < 0 else B[p].compose(rot)
        chain = SkeletonFrame.from_transforms(scene.parents, scene.joints, B)

        if spec.rigid_motion == "handover":
            frac = 0.5 - 0.5 * np.cos(2 * np.pi * s)
            center = scene.rigid_center + np.array([-spec.rigid_travel * frac, 0.0, 0.05 * np.sin(2 * np.pi * s)])
            Rr = rotation_matrix([0.0, 0.0, 1.0], spec.rigid_spin * frac)
        elif spec.rigid_motion == "static":
            center, Rr = scene.rigid_center.copy(), np.eye(3)
        else:
            raise ValueError(f"unknown rigid motion {spec.rigid_motion!r}")
        rigid = SkeletonFrame.from_transforms([-1], rigid_skel.canonical_joints, [RigidTransform(Rr, center - Rr @ scene.rigid_center)])
        out.append({DEFORMABLE: chain, RIGID: rigid})
    return out


def pose_vertices(scene: AnalyticScene, entity: str, verts: np.ndarray, skel: SkeletonFrame, weights: np.ndarray | None = None) -> np.ndarray:
    """Eq.-1 posing of canonical vertices with the analytic weight field."""
    if entity == DEFORMABLE:
        w = scene.skinning_weights(verts) if weights is None else weights
    else:
        w = np.ones((len(verts), 1))
    M = np.einsum("nb,bij->nij", w, skel.bone_transforms)
    return np.einsum("nij,nj->ni", M[:, :3, :3], verts) + M[:, :3, 3]


# ---------------------------------------------------------------------------
# rasterization


@dataclass
class DatasetFrame:
    rgb: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 labels
    skels: dict[str, SkeletonFrame]
    cam: Camera
    depth: np.ndarray | None = None


LIGHT_DIR = np.array([0.4, -0.7, 0.6]) / np.linalg.norm([0.4, -0.7, 0.6])


def rasterize(meshes: Sequence[tuple[np.ndarray, np.ndarray]], cam: Camera):
    """Z-buffer the triangle meshes; returns (depth, mesh id, face id) per pixel (-1 = empty)."""
    H, W = cam.height, cam.width
    all_tri, all_mesh, all_face = [], [], []
    for m, (V, F) in enumerate(meshes):
        all_tri.append(V[F])
        all_mesh.append(np.full(len(F), m))
        all_face.append(np.arange(len(F)))
    depth = np.full(H * W, np.inf)
    mesh_id = np.full(H * W, -1, dtype=np.int64)
    face_id = np.full(H * W, -1, dtype=np.int64)
    if not all_tri:
        return depth.reshape(H, W), mesh_id.reshape(H, W), face_id.reshape(H, W)
    tri = np.concatenate(all_tri)
    tmesh = np.concatenate(all_mesh)
    tface = np.concatenate(all_face)

    pc = tri @ cam.rotation.T + cam.translation  # (T, 3, 3) camera coords
    z = pc[..., 2]
    keep = (z > 1e-6).all(axis=1)
    pc, z, tmesh, tface = pc[keep], z[keep], tmesh[keep], tface[keep]
    uv = (pc @ cam.intrinsics.T)[..., :2] / z[..., None]
    lo = np.floor(uv.min(axis=1) - 0.5).astype(np.int64)
    hi = np.ceil(uv.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [W - 1, H - 1])
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = nx * ny
    valid = counts > 0
    if not valid.any():
        return depth.reshape(H, W), mesh_id.reshape(H, W), face_id.reshape(H, W)
    ti = np.repeat(np.flatnonzero(valid), counts[valid])
    offs = np.arange(len(ti)) - np.repeat(np.cumsum(counts[valid]) - counts[valid], counts[valid])
    px = lo[ti, 0] + offs % nx[ti]
    py = lo[ti, 1] + offs // nx[ti]
    cx, cy = px + 0.5, py + 0.5

    a, b, c = uv[ti, 0], uv[ti, 1], uv[ti, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    ok = np.abs(area) > 1e-14
    safe = np.where(ok, area, 1.0)
    w0 = ((b[:, 0] - cx) * (c[:, 1] - cy) - (b[:, 1] - cy) * (c[:, 0] - cx)) / safe
    w1 = ((c[:, 0] - cx) * (a[:, 1] - cy) - (c[:, 1] - cy) * (a[:, 0] - cx)) / safe
    w2 = 1.0 - w0 - w1
    eps = -1e-9
    inside = ok & (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
    ti, px, py, w0, w1, w2 = ti[inside], px[inside], py[inside], w0[inside], w1[inside], w2[inside]
    # perspective-correct depth: interpolate 1/z with screen-space barycentrics
    zt = z[ti]
    dz = 1.0 / (w0 / zt[:, 0] + w1 / zt[:, 1] + w2 / zt[:, 2])
    pix = py * W + px
    order = np.lexsort((tmesh[ti], dz, pix))
    pix_s = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    sel = order[first]
    depth[pix[sel]] = dz[sel]
    mesh_id[pix[sel]] = tmesh[ti[sel]]
    face_id[pix[sel]] = tface[ti[sel]]
    return depth.reshape(H, W), mesh_id.reshape(H, W), face_id.reshape(H, W)


def face_normals(V: np.ndarray, F: np.ndarray) -> np.ndarray:
    n = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-20)


def render_meshes(posed: dict[str, tuple[np.ndarray, np.ndarray]], colors: dict, cam: Camera):
    names = [e for e in ENTITY_NAMES if e in posed]
    depth, mid, fid = rasterize([posed[e] for e in names], cam)
    H, W = cam.height, cam.width
    rgb = np.zeros((H, W, 3))
    mask = np.zeros((H, W), dtype=np.uint8)
    for m, e in enumerate(names):
        hit = mid == m
        if not hit.any():
            continue
        V, F = posed[e]
        n = face_normals(V, F)[fid[hit]]
        shade = 0.25 + 0.75 * np.abs(n @ LIGHT_DIR)
        rgb[hit] = np.asarray(colors[e])[None] * shade[:, None]
        mask[hit] = MASK_LABELS[e]
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    return img, mask, depth


class GroundTruthMeshes:
    """Canonical meshes and their analytic weights, cached per scene."""

    def __init__(self, scene: AnalyticScene, voxel: float | None = None):
        self.scene = scene
        self.canonical = {e: scene.canonical_mesh(e, voxel) for e in ENTITY_NAMES}
        self.weights = {DEFORMABLE: scene.skinning_weights(self.canonical[DEFORMABLE][0])}

    def posed(self, skels: dict[str, SkeletonFrame]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for e in ENTITY_NAMES:
            V, F = self.canonical[e]
            out[e] = (pose_vertices(self.scene, e, V, skels[e], self.weights.get(e)), F)
        return out


def render_ground_truth(scene: AnalyticScene, skels: dict[str, SkeletonFrame], cam: Camera, gt: GroundTruthMeshes | None = None) -> DatasetFrame:
    gt = gt or GroundTruthMeshes(scene)
    img, mask, depth = render_meshes(gt.posed(skels), scene.colors, cam)
    return DatasetFrame(img, mask, skels, cam, depth)


def default_cameras(spec: SceneSpec) -> list[Camera]:
    cams = []
    target = np.asarray(spec.camera_target, dtype=np.float64)
    for c in range(spec.cams):
        ang = -np.pi / 2 + c * (2 * np.pi / max(spec.cams, 1)) if spec.cams > 1 else -np.pi / 2
        eye = target + spec.camera_distance * np.array([np.cos(ang), np.sin(ang), 0.15])
        cams.append(Camera.look_at(eye, target, focal=spec.focal, width=spec.resolution, height=spec.resolution))
    return cams


# ---------------------------------------------------------------------------
# dataset io


def write_obj(path: Path, V: np.ndarray, F: np.ndarray) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in V.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in F.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: Path) -> tuple[np.ndarray, np.ndarray]:
    V, F = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            V.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("f "):
            F.append([int(tok.split("/")[0]) - 1 for tok in line.split()[1:4]])
    return np.asarray(V, dtype=np.float64).reshape(-1, 3), np.asarray(F, dtype=np.int64).reshape(-1, 3)


def export_dataset(
    scene: AnalyticScene,
    frames: Sequence[Sequence[DatasetFrame]],
    path,
    seed: int = 0,
    overwrite: bool = False,
    gt: GroundTruthMeshes | None = None,
) -> Path:
    """Write frames (``frames[t][cam]``) and ground-truth meshes under ``path``."""
    root = Path(path)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{root} exists and is not empty (use overwrite)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    gt = gt or GroundTruthMeshes(scene)
    cams = [f.cam for f in frames[0]]
    (root / "gt").mkdir()
    for e in ENTITY_NAMES:
        write_obj(root / "gt" / f"canonical_{e}.obj", *gt.canonical[e])
    for t, per_cam in enumerate(frames):
        fdir = root / "frames" / f"{t:04d}"
        fdir.mkdir(parents=True)
        for c, fr in enumerate(per_cam):
            Image.fromarray(fr.rgb).save(fdir / f"rgb_{c}.png")
            m = np.zeros(fr.mask.shape + (3,), dtype=np.uint8)
            m[..., 0] = fr.mask
            Image.fromarray(m).save(fdir / f"mask_{c}.png")
        skels = per_cam[0].skels
        doc = {e: skeletons_to_json([skels[e]]) for e in ENTITY_NAMES}
        (fdir / "skel.json").write_text(json.dumps(doc))
        for e, (V, F) in gt.posed(skels).items():
            write_obj(root / "gt" / f"posed_{t:04d}_{e}.obj", V, F)
    lo, hi = scene_bounds(scene, [fr[0].skels for fr in frames], gt)
    meta = {
        "scene_spec": scene.spec.to_dict(),
        "seed": seed,
        "n_frames": len(frames),
        "cameras": [c.to_json() for c in cams],
        "entities": {
            e: {"n_b": int(frames[0][0].skels[e].n_b), "color": np.asarray(scene.colors[e]).tolist()} for e in ENTITY_NAMES
        },
        "bounds": [lo.tolist(), hi.tolist()],
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2))
    return root


def scene_bounds(scene: AnalyticScene, skels: Sequence[dict], gt: GroundTruthMeshes, pad: float = 0.1):
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for fr in skels:
        for V, _ in gt.posed(fr).values():
            lo, hi = np.minimum(lo, V.min(0)), np.maximum(hi, V.max(0))
    return lo - pad, hi + pad


def generate_dataset(spec: SceneSpec | dict | None, path, seed: int = 0, overwrite: bool = False) -> Path:
    scene = build_scene(spec)
    spec = scene.spec
    gt = GroundTruthMeshes(scene)
    cams = default_cameras(spec)
    seq = pose_sequence(scene, spec.frames, seed)
    frames = [[render_ground_truth(scene, sk, cam, gt) for cam in cams] for sk in seq]
    return export_dataset(scene, frames, path, seed=seed, overwrite=overwrite, gt=gt)


@dataclass
class Dataset:
    root: Path
    meta: dict
    cameras: list[Camera]
    skels: list[dict[str, SkeletonFrame]]

    @property
    def n_frames(self) -> int:
        return len(self.skels)

    def image(self, t: int, cam: int = 0) -> np.ndarray:
        return np.asarray(Image.open(self.root / "frames" / f"{t:04d}" / f"rgb_{cam}.png").convert("RGB"))

    def mask(self, t: int, cam: int = 0) -> np.ndarray:
        return np.asarray(Image.open(self.root / "frames" / f"{t:04d}" / f"mask_{cam}.png").convert("RGB"))[..., 0]

    def canonical_skeleton(self, entity: str) -> SkeletonFrame:
        s = self.skels[0][entity]
        return SkeletonFrame.rest(s.parents, s.canonical_joints)

    def gt_mesh_path(self, entity: str, t: int | None = None) -> Path:
        if t is None:
            return self.root / "gt" / f"canonical_{entity}.obj"
        return self.root / "gt" / f"posed_{t:04d}_{entity}.obj"

    @property
    def bounds(self):
        lo, hi = self.meta["bounds"]
        return np.asarray(lo), np.asarray(hi)


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset at {root} (meta.json missing)")
    meta = json.loads(meta_path.read_text())
    cams = [Camera.from_json(c) for c in meta["cameras"]]
    skels = []
    for t in range(meta["n_frames"]):
        doc = json.loads((root / "frames" / f"{t:04d}" / "skel.json").read_text())
        skels.append({e: skeletons_from_json(doc[e])[0] for e in ENTITY_NAMES})
    return Dataset(root, meta, cams, skels)


def dataset_hash(path) -> str:
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
