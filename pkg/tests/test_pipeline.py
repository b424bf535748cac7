import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import detector_grad_error
from sessd.augment import AugConfig
from sessd.geom import iou_bev_matrix
from sessd.pipeline import checkpoint, train
from sessd.pipeline.detector import (
    N_OUT,
    StaleCache,
    ToyDetector,
    ToySpec,
    apply_direction,
    assign_targets,
    cell_features,
    decode,
    detector_backward,
    detector_forward,
    encode,
    forward_features,
    min_area_rect,
    postprocess,
)
from sessd.pipeline.optim import (
    AdamState,
    EmaState,
    LayoutMismatch,
    ParamVector,
    ShapeMismatch,
    adam_step,
    ema_update,
)
from sessd.pipeline.synthetic import SceneSpec, make_dataset, make_scene
from sessd.pipeline.train import (
    METRIC_FIELDS,
    TrainConfig,
    predict,
    pretrain,
    run_training,
    supervised_losses,
    train_se_ssd,
    write_metrics_csv,
)
from sessd.pipeline.voxel import GridSpec, voxelize
from sessd.detections import Detections
from sessd.losses import LossParts, LossWeights, student_total_loss

NO_AUG = dict(global_aug=False, shape_aware=False)


# -- voxelizer --------------------------------------------------------------------------------

def test_grid_dims_and_validation():
    assert GridSpec().dims == (1408, 1600, 40)
    with pytest.raises(ValueError):
        GridSpec(resolution=(0.1, 0.0, 0.1))


def test_voxelize_examples():
    assert len(voxelize(np.zeros((0, 3)))) == 0
    g = voxelize(np.array([[0.0, 0.0, 0.0]]))
    assert g.indices.tolist() == [[0, 800, 30]]
    g = voxelize(np.array([[10.01, 5.01, 0.01, 0.3], [10.03, 5.04, 0.05, 0.9]]))
    assert len(g) == 1 and g.counts[0] == 2
    np.testing.assert_allclose(g.means[0], [10.02, 5.025, 0.03])


def test_voxelize_drops_out_of_range_and_clamps_upper_face():
    g = voxelize(np.array([[-0.1, 0, 0], [71, 0, 0], [10, 0, 1.5], [70.4, 40.0, 1.0]]))
    assert g.indices.tolist() == [[1407, 1599, 39]]


def test_voxel_means_inside_cells_on_random_points():
    rng = np.random.default_rng(0)
    spec = GridSpec()
    pts = rng.uniform(spec.range_min, spec.range_max, (100_000, 3))
    g = voxelize(pts, spec)
    lo, hi = spec.cell_bounds(g.indices)
    assert np.all(g.means >= lo) and np.all(g.means <= hi)
    assert g.counts.sum() == len(pts) and np.all(g.counts >= 1)
    assert np.all(g.indices >= 0) and np.all(g.indices < np.array(spec.dims))


# -- Adam / EMA -----------------------------------------------------------------------------

def _pv(vals):
    vals = np.asarray(vals, dtype=np.float64)
    return ParamVector(vals, (("w", vals.shape),))


def test_param_vector_validation():
    with pytest.raises(LayoutMismatch):
        ParamVector(np.zeros(3), (("w", (2,)),))
    with pytest.raises(ValueError):
        _pv([np.nan])


def test_adam_examples():
    p = _pv([1.0, -2.0, 0.5])
    st = AdamState.zeros(3)
    same = adam_step(p, np.zeros(3), st, 0.1)
    np.testing.assert_array_equal(same.values, p.values)
    st = AdamState.zeros(3)
    g = np.array([3.0, -0.01, 1e3])
    out = adam_step(p, g, st, 0.01)
    np.testing.assert_allclose(p.values - out.values, 0.01 * np.sign(g), rtol=1e-5)
    a = adam_step(p, g, AdamState.zeros(3), 0.01)
    assert np.array_equal(a.values, out.values)
    with pytest.raises(ShapeMismatch):
        adam_step(p, np.zeros(4), AdamState.zeros(3), 0.1)


def test_ema_examples():
    s = _pv([1.0, 2.0])
    assert np.array_equal(ema_update(EmaState(s.copy()), s).teacher.values, s.values)
    out = ema_update(EmaState(_pv([0.0])), _pv([1.0]))
    assert out.teacher.values[0] == pytest.approx(0.001, abs=1e-15) and out.steps == 1
    with pytest.raises(LayoutMismatch):
        ema_update(EmaState(_pv([0.0])), ParamVector(np.zeros(1), (("b", (1,)),)))
    with pytest.raises(ValueError):
        EmaState(_pv([0.0]), decay=1.0)


def test_ema_geometric_convergence():
    rng = np.random.default_rng(1)
    s = _pv(rng.normal(size=50))
    st = EmaState(_pv(rng.normal(size=50)), 0.999)
    d0 = np.linalg.norm(st.teacher.values - s.values)
    for k in range(1, 1001):
        st = ema_update(st, s)
        if k % 100 == 0:
            got = np.linalg.norm(st.teacher.values - s.values)
            assert got == pytest.approx(0.999 ** k * d0, rel=1e-11)


# -- detector --------------------------------------------------------------------------------

def test_zero_weights_give_anchors():
    m = ToyDetector.create()
    m.params = ParamVector(np.zeros_like(m.params.values), m.params.layout)
    dets, _ = detector_forward(m, voxelize(make_scene(np.random.default_rng(0)).points, m.spec.grid))
    np.testing.assert_array_equal(dets.boxes, m.anchors)
    assert np.all(dets.logits == 0)
    assert len(dets) * N_OUT == m.params.views()["b2"].size * len(m.anchors)


def test_forward_finite_and_deterministic():
    m = ToyDetector.create(seed=3)
    grid = voxelize(make_scene(np.random.default_rng(1)).points, m.spec.grid)
    a, _ = detector_forward(m, grid)
    b, _ = detector_forward(m, grid)
    assert np.all(np.isfinite(a.boxes)) and np.all(np.isfinite(a.logits))
    assert np.array_equal(a.boxes, b.boxes) and np.array_equal(a.logits, b.logits)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(2)
    anchors = ToySpec().anchors()
    gts = anchors + np.column_stack([rng.normal(0, 1, (64, 3)), np.zeros((64, 3)), rng.normal(0, 1, 64)])
    gts[:, 3:6] *= rng.uniform(0.7, 1.4, (64, 3))
    np.testing.assert_allclose(decode(anchors, encode(gts, anchors)), gts, atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_differences(seed):
    assert detector_grad_error(seed) < 1e-4


def test_backward_zero_and_linear():
    m = ToyDetector.create(seed=4)
    x = np.random.default_rng(4).normal(size=(64, 15))
    dets, cache = forward_features(m, x)
    zero = detector_backward(m, cache, np.zeros((64, 7)), np.zeros(64), np.zeros((64, 2)))
    assert np.all(zero.values == 0)
    rng = np.random.default_rng(5)
    g1 = (rng.normal(size=(64, 7)), rng.normal(size=64), rng.normal(size=(64, 2)))
    g2 = (rng.normal(size=(64, 7)), rng.normal(size=64), rng.normal(size=(64, 2)))
    a = detector_backward(m, cache, *g1).values
    b = detector_backward(m, cache, *g2).values
    ab = detector_backward(m, cache, *(u + 2 * v for u, v in zip(g1, g2))).values
    np.testing.assert_allclose(ab, a + 2 * b, atol=1e-12)


def test_backward_rejects_stale_cache():
    m = ToyDetector.create(seed=6)
    _, cache = forward_features(m, np.zeros((64, 15)))
    m.params = ParamVector(m.params.values + 1e-3, m.params.layout)
    with pytest.raises(StaleCache):
        detector_backward(m, cache, np.zeros((64, 7)), np.zeros(64))


def test_assign_targets_thresholds_and_forced_positive():
    anchors = ToySpec().anchors()
    gt = anchors[[10]].copy()
    labels, idx = assign_targets(anchors, gt)
    assert labels[10] == 1 and idx[10] == 0
    assert np.all(labels[np.arange(64) != 10] == 0)
    # a gt between anchor centers with no strong overlap still gets one positive
    off = anchors[[10]].copy()
    off[0, :2] += 1.25
    labels, idx = assign_targets(anchors, off)
    assert (labels == 1).sum() >= 1
    ious = iou_bev_matrix(anchors, off)[:, 0]
    assert np.all(labels[(ious > 0.45) & (ious < 0.6) & (labels != 1)] == -1)
    labels, idx = assign_targets(anchors, np.zeros((0, 7)))
    assert np.all(labels == 0) and np.all(idx == -1)


def test_min_area_rect_recovers_rotated_rectangle():
    rng = np.random.default_rng(7)
    local = rng.uniform(-0.5, 0.5, (400, 2)) * [4.0, 1.6]
    th = 0.6
    c, s = math.cos(th), math.sin(th)
    xy = local @ np.array([[c, s], [-s, c]]) + [3.0, -2.0]
    cx, cy, length, width, theta = min_area_rect(xy)
    assert (cx, cy) == pytest.approx((3.0, -2.0), abs=0.1)
    assert length == pytest.approx(4.0, abs=0.15) and width == pytest.approx(1.6, abs=0.15)
    assert abs(math.sin(theta - th)) < 0.05


def test_cell_features_shape_and_empty_grid():
    spec = ToySpec()
    f = cell_features(voxelize(np.zeros((0, 3)), spec.grid), spec)
    assert f.shape == (64, 15)
    assert np.all(f == 0)  # no blobs and no occupancy


def test_apply_direction_and_postprocess():
    boxes = np.array([[0, 0, 0, 1.6, 3.9, 1.5, 0.5], [8, 8, 0, 1.6, 3.9, 1.5, 0.5]])
    dets = Detections(boxes, [2.0, -5.0], [[3.0, -3.0], [0.0, 1.0]])
    flipped = apply_direction(dets)
    assert flipped[0, 6] == pytest.approx(0.5 - math.pi) and flipped[1, 6] == 0.5
    out = postprocess(dets)
    assert len(out) == 1 and out.boxes[0, 6] == pytest.approx(0.5 - math.pi)


# -- training -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scenes():
    return make_dataset(4, 123)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(box_loss="l2")
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)
    assert set(TrainConfig().describe()) >= {"epochs", "lr", "weights", "aug"}


def test_pretrain_reduces_loss_on_one_scene():
    scene = make_scene(np.random.default_rng(8))
    res = pretrain(ToyDetector.create(seed=8), [scene], 200, TrainConfig(**NO_AUG))
    assert len(res.epoch_losses) == 200
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    assert res.teacher is None


def test_zero_learning_rate_leaves_parameters(scenes):
    init = ToyDetector.create(seed=1)
    res = pretrain(init, scenes, 2, TrainConfig(lr=0.0, lr_min=0.0))
    np.testing.assert_array_equal(res.student.params.values, init.params.values)


def test_zero_mu_without_augmentation_matches_pretrain(scenes):
    init = ToyDetector.create(seed=2)
    cfg = TrainConfig(epochs=3, mu_override=0.0, **NO_AUG)
    se = train_se_ssd(scenes, cfg, init)
    pre = pretrain(init, scenes, 3, cfg)
    np.testing.assert_array_equal(se.student.params.values, pre.student.params.values)
    assert [m["loss_cls"] for m in se.metrics] == [m["loss_cls"] for m in pre.metrics]


def test_zero_decay_teacher_tracks_student(scenes):
    seen = []
    train_se_ssd(scenes, TrainConfig(epochs=2, ema_decay=0.0), ToyDetector.create(seed=3),
                 on_epoch=lambda e, s, t: seen.append(np.array_equal(s.params.values, t.params.values)))
    assert seen == [True, True]


def test_fixed_seed_gives_identical_metrics(scenes, tmp_path):
    init = ToyDetector.create(seed=4)
    a = train_se_ssd(scenes, TrainConfig(epochs=2), init)
    b = train_se_ssd(scenes, TrainConfig(epochs=2), init)
    write_metrics_csv(tmp_path / "a.csv", a.metrics)
    write_metrics_csv(tmp_path / "b.csv", b.metrics)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(METRIC_FIELDS)
    assert len(a.metrics) == 2 * len(scenes)


def test_teacher_only_moves_by_ema(scenes, monkeypatch):
    adam_inputs, teacher_vectors = [], []
    real_adam, real_ema = train.adam_step, train.ema_update

    def spy_adam(params, grads, state, lr):
        adam_inputs.append(params.values)
        return real_adam(params, grads, state, lr)

    def spy_ema(state, student):
        out = real_ema(state, student)
        teacher_vectors.extend([state.teacher.values, out.teacher.values])
        return out

    monkeypatch.setattr(train, "adam_step", spy_adam)
    monkeypatch.setattr(train, "ema_update", spy_ema)
    train_se_ssd(scenes, TrainConfig(epochs=2), ToyDetector.create(seed=5))
    assert adam_inputs and teacher_vectors
    for a in adam_inputs:
        assert not any(np.shares_memory(a, t) for t in teacher_vectors)


def test_consistency_losses_recorded_and_mu_ramps(scenes):
    res = train_se_ssd(scenes, TrainConfig(epochs=3, ramp_epochs=2.0), ToyDetector.create(seed=6))
    mus = [m["mu_t"] for m in res.metrics]
    assert mus[0] == pytest.approx(math.exp(-5)) and mus[-1] == 1.0
    assert all(b >= a for a, b in zip(mus, mus[1:]))
    pre = pretrain(ToyDetector.create(seed=6), scenes, 1)
    assert all(m["loss_cons_box"] == 0 and m["mu_t"] == 0 for m in pre.metrics)


def _total_loss(model, scenes_):
    total = 0.0
    for s in scenes_:
        dets, _ = forward_features(model, train._features(model, s.points))
        cls, box, dirl, *_ = supervised_losses(dets, model.anchors, s.boxes, TrainConfig())
        total += student_total_loss(LossParts(cls, box, dirl), LossWeights(mu_t=0.0))
    return total / len(scenes_)


def test_loss_decreases_over_first_fifty_steps_for_most_seeds():
    wins = 0
    for seed in range(50):
        data = make_dataset(5, 700 + seed)
        init = ToyDetector.create(seed=seed)
        res = train_se_ssd(data, TrainConfig(epochs=10, seed=seed), init)
        wins += _total_loss(res.student, data) < _total_loss(init, data)
    assert wins >= 45


def test_predict_returns_post_processed_detections(scenes):
    dets = predict(ToyDetector.create(seed=7), scenes[0], score_thresh=0.0)
    assert len(dets) >= 1
    assert np.all(iou_bev_matrix(dets.boxes, dets.boxes)[~np.eye(len(dets), dtype=bool)] <= 0.1 + 1e-12)


def test_run_training_needs_scenes():
    with pytest.raises(ValueError):
        run_training([], TrainConfig(), ToyDetector.create())


def test_synthetic_scene_properties():
    spec = SceneSpec()
    s = make_scene(np.random.default_rng(9), spec)
    assert spec.n_cars[0] <= len(s.labels) <= spec.n_cars[1]
    assert np.all(np.abs(s.points[:, :2]) <= spec.extent)
    b = s.boxes
    iou = iou_bev_matrix(b, b)
    assert np.all(iou[~np.eye(len(b), dtype=bool)] == 0)
    assert all(lb.bbox_height > 0 for lb in s.labels)


# -- checkpoints ----------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = ToyDetector.create(seed=9)
    checkpoint.save(tmp_path / "m.ckpt", m.params, {"role": "student"})
    params, meta = checkpoint.load(tmp_path / "m.ckpt")
    assert np.array_equal(params.values, m.params.values) and params.layout == m.params.layout
    assert meta == {"role": "student"}
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:4] == b"SE3D"


def test_checkpoint_errors():
    data = checkpoint.dumps(_pv([1.0, 2.0]))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + data[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(data[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(data[:-8])
