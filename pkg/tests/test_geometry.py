import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CHAIN_JOINTS, CHAIN_PARENTS, posed_chain, random_skeleton, smooth_chain_weights
from oracles import lbs_point, nearest_joint_bruteforce, segment_distance
from tfsnerf.geometry import (
    RigidTransform,
    SkeletonFrame,
    SolverDivergedError,
    bone_segments,
    broyden_inverse_lbs,
    canonical_init,
    lbs_forward,
    nearest_joint_onehot,
    rotation_matrix,
    sample_bone_points,
    skeletons_from_json,
    skeletons_to_json,
)

T64 = dict(dtype=torch.float64)


def translations(*ts):
    n = len(ts)
    return SkeletonFrame.from_transforms([-1] * n, np.zeros((n, 3)), [RigidTransform(np.eye(3), t) for t in ts])


# ----- RigidTransform / SkeletonFrame


def test_rigid_transform_rejects_non_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rigid_compose_and_inverse_are_closed(seed):
    rng = np.random.default_rng(seed)
    A = RigidTransform(rotation_matrix(rng.normal(size=3), rng.uniform(-3, 3)), rng.normal(size=3))
    B = RigidTransform(rotation_matrix(rng.normal(size=3), rng.uniform(-3, 3)), rng.normal(size=3))
    x = rng.normal(size=3)
    np.testing.assert_allclose(A.compose(B).apply(x), A.apply(B.apply(x)), atol=1e-12)
    np.testing.assert_allclose(A.inverse().apply(A.apply(x)), x, atol=1e-12)
    R = A.compose(B).rotation
    assert abs(np.linalg.det(R) - 1) < 1e-6


def test_skeleton_forest_and_joint_invariants():
    with pytest.raises(ValueError, match="cycle"):
        SkeletonFrame.rest([1, 0], np.zeros((2, 3)))
    sk = posed_chain(np.random.default_rng(0))
    sk.validate()
    bad = SkeletonFrame(sk.parents, sk.canonical_joints, sk.posed_joints + 0.1, sk.bone_transforms)
    with pytest.raises(ValueError):
        bad.validate()


def test_skeleton_json_round_trip_is_bitwise():
    rng = np.random.default_rng(1)
    frames = [posed_chain(rng) for _ in range(3)]
    doc = json.loads(json.dumps(skeletons_to_json(frames)))
    assert len(doc["bone_transforms"][0][0]) == 12
    back = skeletons_from_json(doc)
    for a, b in zip(frames, back):
        assert a == b


# ----- lbs_forward


def test_lbs_examples():
    sk = translations([0, 0, 0])
    assert torch.equal(lbs_forward(torch.tensor([1.0], **T64), sk, torch.tensor([1.0, 2.0, 3.0], **T64)), torch.tensor([1.0, 2.0, 3.0], **T64))
    sk = translations([0, 0, 5])
    out = lbs_forward(torch.tensor([1.0], **T64), sk, torch.tensor([1.0, 0.0, 0.0], **T64))
    assert torch.allclose(out, torch.tensor([1.0, 0.0, 5.0], **T64))
    sk = translations([2, 0, 0], [0, 2, 0])
    out = lbs_forward(torch.tensor([0.5, 0.5], **T64), sk, torch.zeros(3, **T64))
    assert torch.allclose(out, torch.tensor([1.0, 1.0, 0.0], **T64))


def test_lbs_rejects_dimension_mismatch(chain_posed):
    with pytest.raises(ValueError):
        lbs_forward(torch.ones(3, **T64) / 3, chain_posed, torch.zeros(3, **T64))


def test_lbs_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    sk = random_skeleton(rng, 6)
    w = rng.dirichlet(np.ones(6), size=50)
    x = rng.normal(size=(50, 3))
    got = lbs_forward(torch.tensor(w), sk, torch.tensor(x)).numpy()
    want = np.stack([lbs_point(w[i], sk.bone_transforms, x[i]) for i in range(50)])
    np.testing.assert_allclose(got, want, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 8))
@settings(max_examples=40, deadline=None)
def test_onehot_lbs_equals_single_transform(seed, n_b):
    rng = np.random.default_rng(seed)
    sk = random_skeleton(rng, n_b)
    b = int(rng.integers(n_b))
    x = rng.normal(size=3)
    w = torch.zeros(n_b, **T64)
    w[b] = 1.0
    got = lbs_forward(w, sk, torch.tensor(x)).numpy()
    np.testing.assert_allclose(got, sk.transform(b).apply(x), atol=1e-12)


# ----- nearest joint / canonical init


def test_nearest_joint_examples():
    sk = posed_chain(np.random.default_rng(0))
    x = torch.tensor(sk.posed_joints[3])
    assert int(nearest_joint_onehot(x, sk).argmax()) == 3
    tie = SkeletonFrame.rest([-1, 0, 0], [[10.0, 10.0, 10.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    w = nearest_joint_onehot(torch.zeros(3, **T64), tie)
    assert w.tolist() == [0.0, 1.0, 0.0]


def test_nearest_joint_matches_bruteforce_24_joints():
    rng = np.random.default_rng(4)
    sk = random_skeleton(rng, 24)
    x = rng.normal(size=(500, 3))
    got = nearest_joint_onehot(torch.tensor(x), sk).argmax(-1).numpy()
    want = [nearest_joint_bruteforce(p, sk.posed_joints) for p in x]
    assert got.tolist() == want
    assert torch.allclose(nearest_joint_onehot(torch.tensor(x), sk).sum(-1), torch.ones(500, **T64))


def test_canonical_init_examples(chain_posed, chain_rest):
    for k in range(4):
        got = canonical_init(torch.tensor(chain_posed.posed_joints[k]), chain_posed).numpy()
        np.testing.assert_allclose(got, CHAIN_JOINTS[k], atol=1e-12)
    x = torch.randn(20, 3, **T64)
    assert torch.allclose(canonical_init(x, chain_rest), x)
    # pure rotation about the origin: canonical_k + R^T delta
    R = rotation_matrix([1.0, 2.0, 0.5], 0.7)
    J0 = np.array([[0.3, 0.0, 0.0]])
    sk = SkeletonFrame.from_transforms([-1], J0, [RigidTransform(R, np.zeros(3))])
    delta = np.array([0.01, -0.02, 0.015])
    got = canonical_init(torch.tensor(sk.posed_joints[0] + delta), sk).numpy()
    np.testing.assert_allclose(got, J0[0] + R.T @ delta, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_canonical_init_inverts_onehot_blend(seed):
    rng = np.random.default_rng(seed)
    sk = random_skeleton(rng, 5)
    x_v = torch.tensor(rng.normal(size=(64, 3)))
    w = nearest_joint_onehot(x_v, sk)
    back = lbs_forward(w, sk, canonical_init(x_v, sk))
    assert torch.allclose(back, x_v, atol=1e-6)


# ----- Broyden


def test_broyden_identity_pose_returns_immediately(chain_rest):
    x_v = torch.randn(10, 3, **T64)
    x, res, iters = broyden_inverse_lbs(x_v, smooth_chain_weights(), chain_rest)
    assert torch.allclose(x, x_v)
    assert int(iters.max()) == 0


def test_broyden_single_translated_bone():
    sk = translations([0.3, -0.1, 0.2])
    x_v = torch.randn(16, 3, **T64)
    x, res, _ = broyden_inverse_lbs(x_v, lambda p: torch.ones(p.shape[0], 1, dtype=p.dtype), sk, x0=torch.zeros(16, 3, **T64))
    assert torch.allclose(x, x_v - torch.tensor([0.3, -0.1, 0.2], **T64), atol=1e-5)
    assert (res <= 1e-5).all()


def test_broyden_recovers_chain_points():
    rng = np.random.default_rng(7)
    field = smooth_chain_weights()
    ok = 0
    for _ in range(50):
        sk = posed_chain(rng, 0.6)
        seg = int(rng.integers(3))
        x_c = torch.tensor(CHAIN_JOINTS[seg] + rng.uniform() * 0.25 * np.array([0, 0, 1.0]) + rng.normal(size=3) * 0.05)[None]
        x_v = lbs_forward(field(x_c), sk, x_c)
        x, res, _ = broyden_inverse_lbs(x_v, field, sk, tol=1e-7)
        ok += float((x - x_c).norm()) < 1e-4
    assert ok >= 49


def test_broyden_best_iterate_when_unconverged(chain_posed):
    field = smooth_chain_weights()
    x_v = torch.tensor(chain_posed.posed_joints[1:2]) + 0.02
    x, res, iters = broyden_inverse_lbs(x_v, field, chain_posed, tol=1e-30, max_iter=3)
    assert int(iters) == 3
    g = (lbs_forward(field(x), chain_posed, x) - x_v).norm()
    assert abs(float(g) - float(res)) < 1e-12


def test_broyden_raises_on_divergence(chain_posed):
    def ok_then_nan(p, calls=[0]):
        calls[0] += 1
        w = torch.full((p.shape[0], 4), 0.25, dtype=p.dtype)
        return w if calls[0] <= 2 else w * float("nan")

    with pytest.raises(SolverDivergedError) as exc:
        broyden_inverse_lbs(torch.tensor([[0.3, 0.1, 0.4]], **T64), ok_then_nan, chain_posed)
    assert exc.value.iteration >= 1
    with pytest.raises(ValueError):
        broyden_inverse_lbs(torch.zeros(1, 3, **T64), smooth_chain_weights(), chain_posed, tol=0.0)


# ----- bone sampling


def test_bone_samples_at_midpoints(chain_posed):
    pts = sample_bone_points(chain_posed, True, 3, radius=0.0, at_midpoints=True)
    J = chain_posed.posed_joints
    want = [(J[p] + J[c]) / 2 for p, c in bone_segments(chain_posed)]
    np.testing.assert_allclose(pts, want, atol=1e-12)


def test_bone_samples_correspond_between_canonical_and_posed(chain_posed):
    can, bones = sample_bone_points(chain_posed, False, 200, radius=0.03, seed=5, return_bones=True)
    pos = sample_bone_points(chain_posed, True, 200, radius=0.03, seed=5)
    mapped = np.stack([chain_posed.transform(b).apply(p) for b, p in zip(bones, can)])
    np.testing.assert_allclose(mapped, pos, atol=1e-12)


def test_bone_samples_monte_carlo_distance():
    sk = SkeletonFrame.rest([-1, 0, 1], [[0, 0, 0], [0, 0, 0.3], [0.3, 0, 0.3]])
    r = 0.02
    pts = sample_bone_points(sk, False, 1000, radius=r, seed=1)
    d = [min(segment_distance(p, sk.canonical_joints[a], sk.canonical_joints[b]) for a, b in bone_segments(sk)) for p in pts]
    assert np.mean(d) <= 2 * r


def test_bone_samples_single_joint_and_determinism():
    sk = SkeletonFrame.rest([-1], [[0.1, 0.2, 0.3]])
    pts = sample_bone_points(sk, False, 500, radius=0.05, seed=2)
    assert np.abs(pts.mean(0) - [0.1, 0.2, 0.3]).max() < 0.01
    a = sample_bone_points(posed_chain(np.random.default_rng(0)), True, 64, 0.03, 9)
    b = sample_bone_points(posed_chain(np.random.default_rng(0)), True, 64, 0.03, 9)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        sample_bone_points(sk, False, 0)
