from __future__ import annotations

import numpy as np
import pytest
import torch

from tfsnerf.geometry import RigidTransform, SkeletonFrame, rotation_matrix
from tfsnerf.model import ModelConfig
from tfsnerf.scene import SceneSpec, generate_dataset
from tfsnerf.training import TrainConfig

CHAIN_PARENTS = [-1, 0, 1, 2]
CHAIN_JOINTS = np.array([[0.0, 0.0, 0.1], [0.0, 0.0, 0.35], [0.0, 0.0, 0.6], [0.0, 0.0, 0.85]])


def posed_chain(rng: np.random.Generator, amp: float = 0.6, parents=CHAIN_PARENTS, joints=CHAIN_JOINTS, translate: float = 0.0) -> SkeletonFrame:
    """Random articulation of a serial chain; each bone rotates about its own joint."""
    n = len(parents)
    B: list[RigidTransform | None] = [None] * n
    for k in range(n):
        axis = rng.normal(size=3)
        R = rotation_matrix(axis, rng.uniform(-amp, amp))
        T = RigidTransform(R, joints[k] - R @ joints[k])
        p = parents[k]
        if p < 0:
            T = RigidTransform(np.eye(3), rng.normal(size=3) * translate).compose(T)
        B[k] = T if p < 0 else B[p].compose(T)
    return SkeletonFrame.from_transforms(parents, joints, B)


def random_skeleton(rng: np.random.Generator, n_b: int, amp: float = 0.8) -> SkeletonFrame:
    """Random tree with independent random rigid transforms per bone (only the joint invariant holds)."""
    parents = [-1] + [int(rng.integers(0, k)) for k in range(1, n_b)]
    J0 = rng.normal(size=(n_b, 3)) * 0.4
    Ts = [RigidTransform(rotation_matrix(rng.normal(size=3), rng.uniform(-amp, amp)), rng.normal(size=3) * 0.2) for _ in range(n_b)]
    return SkeletonFrame.from_transforms(parents, J0, Ts)


def smooth_chain_weights(tau=0.01):
    """Softmax over squared distances to the three chain segments; the last bone gets no weight."""
    a = torch.tensor(CHAIN_JOINTS[:-1])
    b = torch.tensor(CHAIN_JOINTS[1:])

    def field(x):
        ab = b - a
        ap = x[:, None, :] - a
        t = ((ap * ab).sum(-1) / (ab * ab).sum(-1)).clamp(0, 1)
        d2 = ((ap - t[..., None] * ab) ** 2).sum(-1)
        logits = torch.cat([-d2 / tau, torch.full((x.shape[0], 1), -1e9, dtype=x.dtype)], 1)
        return torch.softmax(logits, -1)

    return field


@pytest.fixture
def chain_rest() -> SkeletonFrame:
    return SkeletonFrame.rest(CHAIN_PARENTS, CHAIN_JOINTS)


@pytest.fixture
def chain_posed() -> SkeletonFrame:
    return posed_chain(np.random.default_rng(3))


TINY_MODEL = dict(inn_width=16, proj_dim=8, skin_width=16, sdf_width=32, sdf_layers=8, feat_dim=16, rgb_width=16)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(
        rays_per_entity=24,
        samples_per_ray=12,
        bone_samples=32,
        cycle_points=32,
        checkpoint_every=2,
        model=ModelConfig(**TINY_MODEL),
    )
    base.update(kw)
    return TrainConfig(**base)


SMALL_SCENE = dict(frames=4, resolution=64, focal=140.0, mesh_voxel=0.02)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    generate_dataset(SceneSpec(**SMALL_SCENE), root, seed=0)
    return root


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
