import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from conftest import SMALL_SCENE
from oracles import lbs_point, raycast_label
from tfsnerf.geometry import skeletons_to_json
from tfsnerf.rendering import MASK_LABELS, Camera
from tfsnerf.scene import (
    DEFORMABLE,
    ENTITY_NAMES,
    RIGID,
    GroundTruthMeshes,
    SceneSpec,
    build_scene,
    dataset_hash,
    default_cameras,
    generate_dataset,
    load_dataset,
    pose_sequence,
    read_obj,
    render_ground_truth,
)


def test_default_chain_skeleton():
    scene = build_scene()
    assert scene.parents.tolist() == [-1, 0, 1, 2]
    sk = scene.canonical_skeleton(DEFORMABLE)
    np.testing.assert_allclose(np.diff(sk.canonical_joints[:, 2]), 0.25)
    assert scene.canonical_skeleton(RIGID).n_b == 1
    with pytest.raises(ValueError):
        build_scene({"n_bones": 4, "parents": [-1, 0, 1]})
    with pytest.raises(ValueError):
        build_scene({"colour": 1})


def test_weights_split_evenly_at_shared_joint():
    scene = build_scene()
    w = scene.skinning_weights(scene.joints[1:3])
    np.testing.assert_allclose(w[0], [0.5, 0.5, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(w[1], [0.0, 0.5, 0.5, 0.0], atol=1e-9)


@given(arrays(np.float64, (32, 3), elements=st.floats(-2, 2)))
@settings(max_examples=40, deadline=None)
def test_weights_are_normalized(p):
    w = build_scene().skinning_weights(p)
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)


def test_zero_amplitude_is_canonical():
    scene = build_scene({"rigid_motion": "static"})
    for fr in pose_sequence(scene, 5, seed=3, amplitude=0.0):
        for e in ENTITY_NAMES:
            np.testing.assert_allclose(fr[e].bone_transforms, np.broadcast_to(np.eye(4), fr[e].bone_transforms.shape), atol=1e-15)


def test_pose_sequence_is_joint_consistent_and_seeded():
    scene = build_scene()
    a = pose_sequence(scene, 8, seed=1)
    b = pose_sequence(scene, 8, seed=1)
    for fa, fb in zip(a, b):
        for e in ENTITY_NAMES:
            fa[e].validate()
            assert fa[e] == fb[e]
    c = pose_sequence(scene, 8, seed=2)
    assert not np.allclose(a[3][DEFORMABLE].bone_transforms, c[3][DEFORMABLE].bone_transforms)


def _bbox(V):
    return V.min(0), V.max(0)


def test_handover_brings_entities_into_contact():
    scene = build_scene()
    gt = GroundTruthMeshes(scene, voxel=0.03)
    seq = pose_sequence(scene, 50, seed=0)
    hits = 0
    for fr in seq:
        posed = gt.posed(fr)
        (lo1, hi1), (lo2, hi2) = _bbox(posed[DEFORMABLE][0]), _bbox(posed[RIGID][0])
        hits += bool(np.all(np.maximum(lo1, lo2) <= np.minimum(hi1, hi2)))
    assert hits >= 0.3 * len(seq)


def test_empty_view_is_background():
    scene = build_scene()
    cam = Camera.look_at([0.0, -3.0, 0.5], [0.0, -6.0, 0.5], focal=60.0, width=32, height=32)
    fr = render_ground_truth(scene, pose_sequence(scene, 1)[0], cam, GroundTruthMeshes(scene, 0.03))
    assert (fr.mask == 0).all() and (fr.rgb == 0).all()


def test_box_in_front_occludes_chain():
    scene = build_scene({"rigid_center": (0.0, -0.5, 0.45), "rigid_motion": "static"})
    cam = Camera.look_at([0.0, -3.0, 0.45], [0.0, 0.0, 0.45], focal=100.0, width=33, height=33)
    fr = render_ground_truth(scene, pose_sequence(scene, 1, amplitude=0.0)[0], cam, GroundTruthMeshes(scene, 0.02))
    assert fr.mask[16, 16] == MASK_LABELS[RIGID]
    # the chain still shows above the box
    assert (fr.mask == MASK_LABELS[DEFORMABLE]).any()


def test_mask_agrees_with_ray_cast_oracle():
    scene = build_scene()
    gt = GroundTruthMeshes(scene, voxel=0.03)
    skels = pose_sequence(scene, 10, seed=0)[4]
    cam = default_cameras(SceneSpec(resolution=128, focal=280.0))[0]
    fr = render_ground_truth(scene, skels, cam, gt)
    posed = gt.posed(skels)
    meshes = [posed[e] for e in ENTITY_NAMES]
    labels = [MASK_LABELS[e] for e in ENTITY_NAMES]
    rng = np.random.default_rng(0)
    flat = rng.choice(128 * 128, size=10_000, replace=False)
    pix = np.stack([flat % 128, flat // 128], axis=1)
    o, d = cam.pixel_rays(pix)
    want = np.array([raycast_label(o[i], d[i], meshes, labels)[0] for i in range(len(pix))])
    got = fr.mask[pix[:, 1], pix[:, 0]]
    assert (want > 0).sum() > 500  # both entities are actually in view
    assert set(np.unique(want)) >= {1, 2}
    assert np.array_equal(got, want), int((got != want).sum())


def test_export_layout_and_round_trip(small_dataset):
    root = small_dataset
    assert len(list(root.glob("frames/*/rgb_0.png"))) == SMALL_SCENE["frames"]
    assert len(list(root.glob("frames/*/mask_0.png"))) == SMALL_SCENE["frames"]
    meta = json.loads((root / "meta.json").read_text())
    assert meta["n_frames"] == SMALL_SCENE["frames"]
    assert meta["entities"][DEFORMABLE]["n_b"] == 4 and meta["entities"][RIGID]["n_b"] == 1
    ds = load_dataset(root)
    scene = build_scene(SceneSpec(**SMALL_SCENE))
    seq = pose_sequence(scene, SMALL_SCENE["frames"], seed=0)
    for t in range(ds.n_frames):
        for e in ENTITY_NAMES:
            a, b = ds.skels[t][e], seq[t][e]
            assert a == b
            assert np.array_equal(a.bone_transforms, b.bone_transforms)
            assert skeletons_to_json([a]) == skeletons_to_json([b])
    assert ds.image(0).shape == (64, 64, 3) and ds.mask(0).shape == (64, 64)
    assert set(np.unique(ds.mask(0))) <= {0, 1, 2}


def test_posed_meshes_equal_lbs_of_canonical(small_dataset):
    ds = load_dataset(small_dataset)
    scene = build_scene(SceneSpec(**SMALL_SCENE))
    for e in ENTITY_NAMES:
        Vc, Fc = read_obj(ds.gt_mesh_path(e))
        W = scene.skinning_weights(Vc) if e == DEFORMABLE else np.ones((len(Vc), 1))
        for t in (0, ds.n_frames - 1):
            Vp, Fp = read_obj(ds.gt_mesh_path(e, t))
            assert np.array_equal(Fc, Fp)
            mats = ds.skels[t][e].bone_transforms
            idx = np.random.default_rng(t).choice(len(Vc), size=200, replace=False)
            want = np.array([lbs_point(W[i], mats, Vc[i]) for i in idx])
            np.testing.assert_allclose(Vp[idx], want, atol=1e-12)


def test_generation_is_deterministic_and_refuses_overwrite(tmp_path, small_dataset):
    spec = dict(SMALL_SCENE, frames=2)
    a = generate_dataset(spec, tmp_path / "a", seed=0)
    b = generate_dataset(spec, tmp_path / "b", seed=0)
    c = generate_dataset(spec, tmp_path / "c", seed=1)
    assert dataset_hash(a) == dataset_hash(b)
    assert dataset_hash(a) != dataset_hash(c)
    with pytest.raises(FileExistsError):
        generate_dataset(spec, a, seed=0)
    generate_dataset(spec, a, seed=1, overwrite=True)
    assert dataset_hash(a) == dataset_hash(c)
