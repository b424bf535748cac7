import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import check_augment_invariants
from sessd.augment import (
    AugConfig,
    AugOp,
    AugRecord,
    InvalidK,
    PointOutsideBox,
    apply_record,
    dropout_pyramid,
    farthest_point_sampling,
    global_augment,
    local_augment,
    partition_pyramids,
    shape_aware_augment,
    sparsify_pyramid,
    swap_pyramids,
)
from sessd.geom import (
    Box3D,
    Transform,
    apply_transform,
    apply_transform_points,
    from_box_frame,
    iou_bev_matrix,
    points_in_box,
)
from sessd.pipeline.synthetic import make_scene
from sessd.scene import ObjectLabel, Scene

CUBE = Box3D(0, 0, 0, 2, 2, 2, 0)


def interior(rng, box, n):
    local = rng.uniform(-0.5, 0.5, (n, 3)) * np.array([box.l, box.w, box.h])
    return from_box_frame(local, box)


def toy_scene(seed=0, n_obj=3, n_pts=80):
    rng = np.random.default_rng(seed)
    boxes = [Box3D(6.0 * k, rng.uniform(-1, 1), 0.0, rng.uniform(1.4, 2.0), rng.uniform(3.5, 4.5),
                   rng.uniform(1.3, 1.7), rng.uniform(-np.pi, np.pi)) for k in range(n_obj)]
    pts = [interior(rng, b, n_pts) for b in boxes]
    pts.append(np.column_stack([rng.uniform(-5, 20, 40), rng.uniform(8, 12, 40), rng.uniform(-1, 1, 40)]))
    xyz = np.vstack(pts)
    return Scene(np.column_stack([xyz, rng.uniform(0, 1, len(xyz))]), [ObjectLabel("Car", b) for b in boxes])


# -- config and record ------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        AugConfig(p1=1.5)
    with pytest.raises(ValueError):
        AugConfig(sparsify_keep_ratio=0.0)
    with pytest.raises(ValueError):
        AugConfig(scale_range=(0.0, 1.0))


def test_record_text_round_trip():
    rec = AugRecord(Transform(0.1, (0.5, -0.25, 0.0), True, 1.01),
                    [AugOp(0, "dropout", 3, None, 7), AugOp(1, "swap", 5, 2, 2**63 - 2), AugOp(2, "sparsify", 0, None, 1)])
    text = rec.to_text()
    assert text.splitlines()[1] == "obj=0 op=dropout face=3 partner= seed=7"
    assert text.splitlines()[2] == f"obj=1 op=swap face=5 partner=2 seed={2**63 - 2}"
    back = AugRecord.from_text(text)
    assert back.transform == rec.transform and back.ops == rec.ops


def test_record_rejects_unknown_op_and_missing_fields():
    with pytest.raises(ValueError):
        AugOp.from_line("obj=0 op=twist face=1 seed=0")
    with pytest.raises(ValueError):
        AugOp.from_line("obj=0 op=dropout seed=0")


def test_reserved_mixup_opcode_cannot_replay():
    rec = AugRecord(None, [AugOp.from_line("obj=0 op=mixup face=0 partner= seed=0")])
    with pytest.raises(NotImplementedError):
        apply_record(toy_scene(), rec)


# -- partition -----------------------------------------------------------------------------

def test_partition_face_centres_and_tie():
    pts = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1], [0, 0, 0]])
    assert partition_pyramids(pts, CUBE).assignments.tolist() == [0, 1, 2, 3, 4, 5, 0]


def test_partition_tie_order_on_edges():
    # on the +x/+y edge the earlier face (+x) wins; on the -y/+z edge -y wins
    pts = np.array([[0.5, 0.5, 0.0], [0.0, -0.5, 0.5]])
    assert partition_pyramids(pts, CUBE).assignments.tolist() == [0, 3]


def test_partition_rejects_outside_points():
    with pytest.raises(PointOutsideBox):
        partition_pyramids(np.array([[1.01, 0, 0]]), CUBE)
    partition_pyramids(np.array([[1.0 + 5e-7, 0, 0]]), CUBE)  # within tolerance


def test_partition_uniform_cube_chi_square():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (6000, 3))
    counts = np.bincount(partition_pyramids(pts, CUBE).assignments, minlength=6)
    chi2 = float(((counts - 1000.0) ** 2 / 1000.0).sum())
    assert chi2 < 20.52  # 5 dof, p = 0.001


def test_partition_respects_box_pose_and_aspect():
    box = Box3D(3, -2, 1, 1.0, 4.0, 2.0, 0.7)
    local = np.array([[1.9, 0.0, 0.0], [0.0, 0.45, 0.0], [0.0, 0.0, -0.95]])
    parts = partition_pyramids(from_box_frame(local, box), box).assignments
    assert parts.tolist() == [0, 2, 5]


@pytest.mark.parametrize("flip", [False, True])
def test_partition_after_global_transform(flip):
    rng = np.random.default_rng(1)
    box = Box3D(4, 2, 0, 1.7, 4.1, 1.5, 0.4)
    pts = interior(rng, box, 500)
    before = partition_pyramids(pts, box).assignments
    t = Transform(rotation=0.9, translation=(1, -2, 0.3), flip_y=flip, scale=1.04)
    after = partition_pyramids(apply_transform_points(t, pts), apply_transform(t, box)).assignments
    # mirroring swaps the +y and -y pyramids, everything else is unchanged
    expected = np.array([0, 1, 3, 2, 4, 5])[before] if flip else before
    np.testing.assert_array_equal(after, expected)


# -- dropout -------------------------------------------------------------------------------

def test_dropout_examples():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (60, 3))
    part = partition_pyramids(pts, CUBE)
    for f in range(6):
        out = dropout_pyramid(pts, part, f)
        assert len(out) == 60 - len(part.members(f))
        np.testing.assert_array_equal(out, pts[part.assignments != f])
    empty_face = partition_pyramids(np.array([[0.9, 0, 0]]), CUBE)
    np.testing.assert_array_equal(dropout_pyramid(np.array([[0.9, 0, 0]]), empty_face, 3), [[0.9, 0, 0]])
    cur = pts
    for f in range(6):
        cur = dropout_pyramid(cur, partition_pyramids(cur, CUBE), f)
    assert len(cur) == 0


def test_dropout_rejects_bad_face():
    with pytest.raises(ValueError):
        dropout_pyramid(np.zeros((1, 3)), partition_pyramids(np.zeros((1, 3)), CUBE), 6)


# -- swap ----------------------------------------------------------------------------------

def test_swap_with_itself():
    rng = np.random.default_rng(3)
    pts = interior(rng, CUBE, 50)
    a, b = swap_pyramids(pts, CUBE, pts, CUBE, 2)
    key = lambda p: sorted(map(tuple, np.round(p, 12)))  # noqa: E731
    assert key(a) == key(pts) and key(b) == key(pts)


def test_swap_into_empty_pyramid():
    rng = np.random.default_rng(4)
    a_pts = interior(rng, CUBE, 60)
    b_box = Box3D(10, 0, 0, 2, 2, 2, 0)
    b_pts = np.array([[10.9, 0, 0]])  # only +x points
    part = partition_pyramids(a_pts, CUBE)
    a2, b2 = swap_pyramids(a_pts, CUBE, b_pts, b_box, 1)
    assert len(a2) == 60 - len(part.members(1))
    assert len(b2) == 1 + len(part.members(1))


def test_swap_between_twin_boxes_lands_inside():
    rng = np.random.default_rng(5)
    box_a = Box3D(0, 0, 0, 1.8, 4.2, 1.5, 0.3)
    box_b = Box3D(12, -3, 0.2, 1.8, 4.2, 1.5, -2.1)
    pa, pb = interior(rng, box_a, 100), interior(rng, box_b, 100)
    for f in range(6):
        a2, b2 = swap_pyramids(pa, box_a, pb, box_b, f)
        assert points_in_box(a2, box_a).all() and points_in_box(b2, box_b).all()
        assert len(a2) + len(b2) == 200
        # swapped points stay in the same pyramid of their new box
        n_keep = int(np.sum(partition_pyramids(pa, box_a).assignments != f))
        assert np.all(partition_pyramids(a2[n_keep:], box_a).assignments == f)


# -- FPS and sparsify -------------------------------------------------------------------------

def test_fps_examples():
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
    assert sorted(farthest_point_sampling(line, 2, 0).tolist()) == [0, 3]
    assert sorted(farthest_point_sampling(line, 4, 0).tolist()) == [0, 1, 2, 3]
    assert farthest_point_sampling(line, 1, 2).tolist() == [2]


def test_fps_rejects_bad_k():
    pts = np.zeros((3, 3))
    for k in (0, 4):
        with pytest.raises(InvalidK):
            farthest_point_sampling(pts, k, 0)
    with pytest.raises(InvalidK):
        farthest_point_sampling(pts, 1, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_fps_distinct_and_sized(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    k = int(rng.integers(1, n + 1))
    idx = farthest_point_sampling(pts, k, int(rng.integers(n)))
    assert len(idx) == k and len(set(idx.tolist())) == k


def _min_pairwise(p):
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    return d[np.triu_indices(len(p), 1)].min()


def test_fps_spreads_better_than_random_subsets():
    rng = np.random.default_rng(6)
    wins = 0
    for _ in range(100):
        pts = rng.uniform(-1, 1, (60, 3))
        fps = pts[farthest_point_sampling(pts, 10, int(rng.integers(60)))]
        rand = pts[rng.choice(60, 10, replace=False)]
        wins += _min_pairwise(fps) >= _min_pairwise(rand)
    assert wins >= 99


def test_sparsify_examples():
    rng = np.random.default_rng(7)
    pts = interior(rng, CUBE, 80)
    part = partition_pyramids(pts, CUBE)
    np.testing.assert_array_equal(sparsify_pyramid(pts, part, 0, 1.0, rng), pts)
    two = np.array([[0.8, 0.1, 0.0], [0.9, -0.2, 0.1]])
    seed = 11
    kept = sparsify_pyramid(two, partition_pyramids(two, CUBE), 0, 0.5, np.random.default_rng(seed))
    start = np.random.default_rng(seed).permutation(2)[0]
    np.testing.assert_array_equal(kept, two[[start]])


def test_sparsify_keeps_outlier():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cluster = np.column_stack([0.5 + rng.normal(0, 0.01, 99), rng.normal(0, 0.01, 99), rng.normal(0, 0.01, 99)])
        pts = np.vstack([cluster, [[0.95, 0.9, 0.0]]])  # +x pyramid, far corner
        part = partition_pyramids(pts, CUBE)
        assert len(part.members(0)) == 100
        out = sparsify_pyramid(pts, part, 0, 0.1, rng)
        assert len(out) == 10
        assert any(np.array_equal(p, [0.95, 0.9, 0.0]) for p in out)


# -- scene level ---------------------------------------------------------------------------

def test_zero_probabilities_leave_scene_unchanged():
    s = toy_scene()
    out, rec = shape_aware_augment(s, AugConfig(p1=0, p2=0, p3=0), np.random.default_rng(0))
    assert rec.ops == []
    np.testing.assert_array_equal(out.points, s.points)


def test_forced_dropout_on_single_object():
    s = toy_scene(n_obj=1)
    out, rec = shape_aware_augment(s, AugConfig(p1=1, p2=0, p3=0), np.random.default_rng(3))
    assert [op.op for op in rec.ops] == ["dropout"]
    box = s.labels[0].box
    obj_before = s.points[points_in_box(s.points, box, 0.0)]
    obj_after = out.points[points_in_box(out.points, box, 0.0)]
    faces = partition_pyramids(obj_after, box).assignments
    assert not np.any(faces == rec.ops[0].face)
    assert len(obj_after) == len(obj_before) - len(partition_pyramids(obj_before, box).members(rec.ops[0].face))


def test_fixed_seed_is_deterministic_and_replays():
    s = toy_scene(2)
    cfg = AugConfig(p1=0.6, p2=0.5, p3=0.6)
    a, rec_a = shape_aware_augment(s, cfg, np.random.default_rng(9))
    b, rec_b = shape_aware_augment(s, cfg, np.random.default_rng(9))
    assert np.array_equal(a.points, b.points) and rec_a.ops == rec_b.ops
    c = apply_record(s, AugRecord.from_text(rec_a.to_text()), cfg.sparsify_keep_ratio)
    assert np.array_equal(a.points, c.points)


def test_non_object_points_untouched():
    s = toy_scene(4)
    out, _ = shape_aware_augment(s, AugConfig(p1=1, p2=1, p3=1), np.random.default_rng(1))
    inside = np.zeros(len(s.points), bool)
    for lb in s.labels:
        inside |= points_in_box(s.points, lb.box, 0.0)
    bg = s.points[~inside]
    np.testing.assert_array_equal(out.points[: len(bg)], bg)


@pytest.mark.parametrize("seed", range(8))
def test_operator_invariants_on_synthetic_scenes(seed):
    check_augment_invariants(make_scene(np.random.default_rng(seed)), seed)


def test_global_zero_width_is_identity():
    s = toy_scene()
    cfg = AugConfig(rot_range=(0, 0), trans_range=(0, 0, 0), scale_range=(1, 1), flip_prob=0)
    out, t = global_augment(s, cfg, np.random.default_rng(0))
    assert t == Transform.identity()
    np.testing.assert_array_equal(out.points, s.points)
    assert out.labels == s.labels


def test_global_flip_negates_cy_and_reflects_yaw():
    s = toy_scene()
    cfg = AugConfig(rot_range=(0, 0), trans_range=(0, 0, 0), scale_range=(1, 1), flip_prob=1)
    out, t = global_augment(s, cfg, np.random.default_rng(0))
    assert t.flip_y
    for a, b in zip(s.labels, out.labels):
        assert b.box.cy == -a.box.cy
        assert math.isclose(b.box.r, -a.box.r) or math.isclose(abs(a.box.r), math.pi)


@pytest.mark.parametrize("seed", range(5))
def test_global_preserves_membership(seed):
    s = toy_scene(seed)
    out, _ = global_augment(s, AugConfig(), np.random.default_rng(seed))
    for a, b in zip(s.labels, out.labels):
        np.testing.assert_array_equal(points_in_box(s.points, a.box), points_in_box(out.points, b.box))


def test_local_augment_keeps_points_with_boxes_and_avoids_collisions():
    s = toy_scene(5)
    out = local_augment(s, AugConfig(local_trans_range=(1.0, 1.0, 0.0)), np.random.default_rng(2))
    counts_before = [points_in_box(s.points, lb.box, 0.0).sum() for lb in s.labels]
    counts_after = [points_in_box(out.points, lb.box, 1e-9).sum() for lb in out.labels]
    assert counts_after == counts_before
    iou = iou_bev_matrix(out.boxes, out.boxes)
    assert np.all(iou[~np.eye(len(iou), dtype=bool)] == 0)
