"""Shape model: prior behavior, losses, gradients, training, persistence."""

import numpy as np
import pytest

from helpers import fd_grad_at, rel_err, sample_coords
from shapectl import autodiff as ad
from shapectl.autodiff import Tape
from shapectl.nn import init_mlp
from shapectl.odeint import IntegrationGrid, integrate
from shapectl.robot import (
    BackboneShape,
    RobotConfig,
    forward_kinematics,
    sample_dataset,
)
from shapectl.shape_node import (
    ShapeNodeModel,
    ShapeTrainConfig,
    commanded_curvatures,
    evaluate_shape_rmse,
    init_shape_model,
    load_shape_model,
    predict_shape,
    predict_shape_batch,
    rollout_shape,
    save_shape_model,
    shape_loss,
    shape_loss_tensor,
    tip_jacobian,
    train_shape_node,
)


def small_model(rng, cfg, **kw):
    return init_shape_model(rng, cfg, hidden=(16, 16), **kw)


def perturbed_model(rng, cfg, scale=0.05, **kw):
    """Prior model with a nonzero final layer so dynamics depend on state."""
    m = small_model(rng, cfg, **kw)
    m.params.weights[-1][:] = scale * rng.standard_normal(m.params.weights[-1].shape)
    m.params.biases[-1][:] += 0.02 * rng.standard_normal(7)
    return m


def test_model_width_validation(rng):
    with pytest.raises(ValueError):
        ShapeNodeModel(params=init_mlp(rng, [6, 8, 7]))
    with pytest.raises(ValueError):
        ShapeNodeModel(params=init_mlp(rng, [7, 8, 7]), steps_per_segment=0)


def test_train_config_validation():
    ShapeTrainConfig()
    with pytest.raises(ValueError):
        ShapeTrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        ShapeTrainConfig(iterations=0)
    with pytest.raises(ValueError):
        ShapeTrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        ShapeTrainConfig(val_fraction=1.0)


def test_commanded_curvatures_match_groundtruth_map(rng):
    from shapectl.robot import action_to_curvature

    cfg = RobotConfig(n_segments=3)
    q = rng.uniform(-25.0, 25.0, size=(8, 6)).clip(cfg.q_min, cfg.q_max)
    u = commanded_curvatures(cfg, q)
    assert u.shape == (8, 3, 3)
    for b in range(8):
        solo = action_to_curvature(cfg, q[b], mismatch=False).values
        assert np.allclose(u[b], solo, atol=1e-12)
    with pytest.raises(ValueError):
        commanded_curvatures(cfg, np.full((1, 6), 20.0))
    with pytest.raises(ValueError):
        commanded_curvatures(cfg, np.zeros((2, 5)))


def test_prior_model_predicts_straight_backbone(rng):
    for n in (1, 3):
        cfg = RobotConfig(n_segments=n)
        model = small_model(rng, cfg)
        shape = predict_shape(model, np.zeros(2 * n), cfg)
        assert np.linalg.norm(shape.tip - [0.0, 0.0, cfg.total_length]) < 1e-9
        assert np.all(shape.points[:, :2] == 0.0)
        assert shape.points.shape == (1 + 10 * n, 3)
        assert np.array_equal(shape.s, forward_kinematics(cfg, np.zeros(2 * n)).s)


def test_prior_model_ignores_action(rng):
    cfg = RobotConfig(n_segments=2)
    model = small_model(rng, cfg)
    a = predict_shape(model, np.array([3.0, -5.0, 1.0, 2.0]), cfg)
    b = predict_shape(model, np.zeros(4), cfg)
    assert np.array_equal(a.points, b.points)


def test_predict_batch_matches_solo(rng):
    cfg = RobotConfig(n_segments=2)
    model = perturbed_model(rng, cfg)
    q = rng.uniform(cfg.q_min, cfg.q_max, size=(4, 4))
    batch = predict_shape_batch(model, q, cfg)
    assert batch.shape == (4, 20, 3)
    for b in range(4):
        solo = predict_shape(model, q[b], cfg)
        assert np.allclose(batch[b], solo.points[1:], atol=1e-12)


def test_segment_chaining_is_sequential_solves(rng):
    cfg = RobotConfig(n_segments=2, segment_lengths=(0.1, 0.15))
    model = perturbed_model(rng, cfg)
    q = rng.uniform(cfg.q_min, cfg.q_max, size=4)

    tape = Tape()
    ro = rollout_shape(model, cfg, tape, q.reshape(1, -1))
    joint = np.stack([t.value[0] for t in ro.points])

    # manual: same primitives, one segment at a time, reseeded by hand
    tape2 = Tape()
    mt = model.params.as_tensors(tape2)
    from shapectl.nn import mlp_forward

    u0 = commanded_curvatures(cfg, q.reshape(1, -1))
    field = lambda t, x, u: mlp_forward(mt, x)
    p = tape2.tensor(np.zeros((1, 3)))
    aug = tape2.tensor(np.zeros((1, 1)))
    manual = []
    for seg in range(2):
        x0 = ad.concat([p, tape2.tensor(u0[:, seg]), aug], axis=1)
        grid = IntegrationGrid(0.0, cfg.segment_lengths[seg], model.steps_per_segment)
        states = integrate(field, x0, grid, model.solver)
        for st in states[1:]:
            manual.append(st.value[0, :3])
        p = ad.slice_cols(states[-1], 0, 3)
        # the augmentation column seeds the next segment unreset
        aug = ad.slice_cols(states[-1], 6, 7)
    assert np.array_equal(joint, np.stack(manual))


def test_masked_mixed_lengths_match_per_sample(rng):
    # one-segment robots of lengths 0.1 and 0.2 solved jointly on the
    # shared masked grid equal each sample's own sequential solve
    cfg = RobotConfig(n_segments=1)
    model = perturbed_model(rng, cfg)
    q = rng.uniform(cfg.q_min, cfg.q_max, size=(2, 2))
    lengths = np.array([[0.1], [0.2]])

    tape = Tape()
    ro = rollout_shape(model, cfg, tape, q, lengths=lengths)
    n_out = ro.points_per_segment[0]
    joint = np.stack([t.value for t in ro.points])  # (n_out, 2, 3)

    from shapectl.nn import mlp_forward

    u0 = commanded_curvatures(cfg, q)
    h = 0.2 / n_out
    for b, length in enumerate((0.1, 0.2)):
        count = int(round(length / h))
        tape_b = Tape()
        mt = model.params.as_tensors(tape_b)
        x0 = ad.concat(
            [
                tape_b.tensor(np.zeros((1, 3))),
                tape_b.tensor(u0[b : b + 1, 0]),
                tape_b.tensor(np.zeros((1, 1))),
            ],
            axis=1,
        )
        grid = IntegrationGrid(0.0, count * h, count)
        states = integrate(
            lambda t, x, u: mlp_forward(mt, x), x0, grid, model.solver
        )
        for k in range(count):
            assert np.allclose(
                joint[k, b], states[k + 1].value[0, :3], atol=1e-12
            ), f"sample {b} step {k}"
        # frozen tail repeats the endpoint
        for k in range(count, n_out):
            assert np.array_equal(joint[k, b], joint[count - 1, b])


def test_shape_loss_examples(rng):
    cfg = RobotConfig(n_segments=1)
    truth = forward_kinematics(cfg, np.array([4.0, -2.0]))
    assert shape_loss(truth, truth) == 0.0
    moved = BackboneShape(
        s=truth.s.copy(), points=truth.points + np.array([0.003, 0.0, 0.0])
    )
    assert shape_loss(moved, truth) == pytest.approx(0.003, abs=1e-15)
    a = rng.standard_normal((3, 10, 3))
    b = rng.standard_normal((3, 10, 3))
    brute = np.mean(
        [np.linalg.norm(a[i, j] - b[i, j]) for i in range(3) for j in range(10)]
    )
    assert shape_loss(a, b) == pytest.approx(brute, rel=1e-12)


def test_shape_loss_grid_mismatch():
    a = np.zeros((2, 10, 3))
    b = np.zeros((2, 11, 3))
    with pytest.raises(ValueError):
        shape_loss(a, b)


def test_shape_loss_tensor_matches_value(rng):
    cfg = RobotConfig(n_segments=2)
    model = perturbed_model(rng, cfg)
    q = rng.uniform(cfg.q_min, cfg.q_max, size=(3, 4))
    truth = np.stack(
        [forward_kinematics(cfg, qi).points[1:] for qi in q], axis=0
    )
    tape = Tape()
    ro = rollout_shape(model, cfg, tape, q)
    taped = float(shape_loss_tensor(ro, truth).value)
    value = shape_loss(predict_shape_batch(model, q, cfg), truth)
    assert taped == pytest.approx(value, rel=1e-9)


def test_shape_loss_tensor_shape_check(rng):
    cfg = RobotConfig(n_segments=1)
    model = small_model(rng, cfg)
    tape = Tape()
    ro = rollout_shape(model, cfg, tape, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        shape_loss_tensor(ro, np.zeros((2, 9, 3)))


def test_loss_gradient_matches_finite_differences(rng):
    # 2-step arc integration so finite differences stay cheap
    cfg = RobotConfig(n_segments=1)
    model = perturbed_model(rng, cfg, solver="rk4", steps_per_segment=2)
    q = rng.uniform(-10.0, 10.0, size=(3, 2))
    truth = np.stack(
        [forward_kinematics(cfg, qi, points_per_segment=2).points[1:] for qi in q]
    )

    def loss_value():
        tape = Tape()
        ro = rollout_shape(model, cfg, tape, q)
        return float(shape_loss_tensor(ro, truth).value)

    tape = Tape()
    ro = rollout_shape(model, cfg, tape, q)
    loss = shape_loss_tensor(ro, truth)
    grads = ad.backward(loss)
    from shapectl.nn import collect_mlp_grads

    analytic = collect_mlp_grads(grads, ro.mt)
    arrays = model.params.param_arrays()
    nonzero = 0.0
    for a_grad, arr in zip(analytic, arrays):
        nonzero += float(np.abs(a_grad).sum())
        for idx in sample_coords(rng, arr.shape, 4):
            fd = fd_grad_at(loss_value, arr, idx, eps=1e-6)
            assert rel_err(a_grad[idx], fd) < 1e-4
    assert nonzero > 0.0


def test_rollout_rejects_bad_lengths(rng):
    cfg = RobotConfig(n_segments=2)
    model = small_model(rng, cfg)
    tape = Tape()
    with pytest.raises(ValueError):
        rollout_shape(model, cfg, tape, np.zeros((2, 4)), lengths=np.ones((3, 2)))
    with pytest.raises(ValueError):
        rollout_shape(
            model, cfg, tape, np.zeros((2, 4)), lengths=np.array([[0.1, 0.1], [0.0, 0.1]])
        )


def test_tip_jacobian_zero_for_prior(rng):
    cfg = RobotConfig(n_segments=2)
    model = small_model(rng, cfg)
    jac = tip_jacobian(model, np.array([1.0, 2.0, -3.0, 0.5]), cfg)
    assert jac.shape == (3, 4)
    assert np.all(jac == 0.0)


def test_tip_jacobian_matches_finite_differences(rng):
    cfg = RobotConfig(n_segments=2)
    model = perturbed_model(rng, cfg)
    for q in (
        rng.uniform(-8.0, 8.0, size=4),  # interior: clamp inactive
        np.array([12.0, 12.0, -13.0, 9.0]),  # norms > u_max: clamp active
    ):
        jac = tip_jacobian(model, q, cfg)
        q_work = q.copy()
        for j in range(3):
            for c in range(4):
                def tip_component():
                    return float(predict_shape(model, q_work, cfg).tip[j])

                fd = fd_grad_at(tip_component, q_work, c, eps=1e-5)
                assert rel_err(jac[j, c], fd) < 1e-3, (j, c)


def test_shape_continuity_in_action(rng):
    cfg = RobotConfig(n_segments=2)
    model = perturbed_model(rng, cfg)
    q = rng.uniform(-8.0, 8.0, size=4)
    base = predict_shape(model, q, cfg).points
    jac_norm = np.linalg.norm(tip_jacobian(model, q, cfg), 2)
    delta = 1e-3 * rng.standard_normal(4)
    delta /= np.linalg.norm(delta) * 1e3  # exactly 1e-3
    moved = predict_shape(model, q + delta, cfg).points
    sup = np.abs(moved - base).max()
    assert sup <= 10.0 * jac_norm * 1e-3 + 1e-9


def make_training_setup(rng, n_samples=240, mismatch_amplitude=0.1):
    cfg = RobotConfig(n_segments=1, mismatch_amplitude=mismatch_amplitude)
    data = sample_dataset(cfg, n_samples, rng)
    return cfg, data


def test_training_reduces_validation_loss(rng):
    cfg, data = make_training_setup(rng)
    train_cfg = ShapeTrainConfig(
        batch_size=64, iterations=60, val_interval=10, seed=5
    )
    model = small_model(np.random.default_rng(7), cfg)
    model, history = train_shape_node(data, train_cfg, cfg, model=model)
    assert len(history) == 60
    iters, train_losses, val_losses = zip(*history)
    assert iters == tuple(range(1, 61))
    assert all(np.isfinite(train_losses))
    assert val_losses[-1] < val_losses[0]


def test_training_empty_dataset():
    with pytest.raises(ValueError):
        train_shape_node([], ShapeTrainConfig(), RobotConfig(n_segments=1))


def test_training_divergence_names_iteration(rng):
    cfg, data = make_training_setup(rng, n_samples=40)
    model = small_model(rng, cfg)
    model.params.weights[0][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="iteration 1"):
        train_shape_node(
            data, ShapeTrainConfig(batch_size=8, iterations=3), cfg, model=model
        )


def test_training_persistence_roundtrip_is_transparent(rng, tmp_path):
    cfg, data = make_training_setup(rng, n_samples=80)
    first = ShapeTrainConfig(batch_size=32, iterations=4, val_interval=2, seed=3)
    second = ShapeTrainConfig(batch_size=32, iterations=4, val_interval=2, seed=9)

    def leg_one():
        m = small_model(np.random.default_rng(11), cfg)
        m, _ = train_shape_node(data, first, cfg, model=m)
        return m

    # path A: save/load between the legs; path B: straight through
    ma = leg_one()
    save_shape_model(tmp_path / "m.json", ma, cfg)
    ma, cfg_loaded = load_shape_model(tmp_path / "m.json")
    assert cfg_loaded == cfg
    ma, _ = train_shape_node(data, second, cfg, model=ma)

    mb = leg_one()
    mb, _ = train_shape_node(data, second, cfg, model=mb)

    for wa, wb in zip(ma.params.weights, mb.params.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(ma.params.biases, mb.params.biases):
        assert np.array_equal(ba, bb)


def test_model_file_errors(rng, tmp_path):
    cfg = RobotConfig(n_segments=1)
    model = small_model(rng, cfg)
    path = tmp_path / "model.json"
    save_shape_model(path, model, cfg)

    loaded, loaded_cfg = load_shape_model(path)
    assert loaded.solver == model.solver
    assert loaded_cfg == cfg
    for wa, wb in zip(loaded.params.weights, model.params.weights):
        assert np.array_equal(wa, wb)

    (tmp_path / "garbage.json").write_text("{not json")
    with pytest.raises(ValueError):
        load_shape_model(tmp_path / "garbage.json")

    import json

    doc = json.loads(path.read_text())
    doc["robot_config"]["u_max"] = 12.0
    (tmp_path / "tampered.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="hash"):
        load_shape_model(tmp_path / "tampered.json")

    doc2 = json.loads(path.read_text())
    del doc2["params"]
    (tmp_path / "partial.json").write_text(json.dumps(doc2))
    with pytest.raises(ValueError):
        load_shape_model(tmp_path / "partial.json")

    doc3 = json.loads(path.read_text())
    doc3["format"] = "something-else"
    (tmp_path / "other.json").write_text(json.dumps(doc3))
    with pytest.raises(ValueError):
        load_shape_model(tmp_path / "other.json")


def make_samples_with_points(cfg, q, points):
    from shapectl.robot import ActionVector, CurvatureVector, ShapeSample

    s_grid = np.linspace(0.0, cfg.total_length, points.shape[1] + 1)
    out = []
    for i in range(q.shape[0]):
        full = np.vstack([np.zeros((1, 3)), points[i]])
        out.append(
            ShapeSample(
                action=ActionVector(q[i]),
                curvature=CurvatureVector(np.zeros((cfg.n_segments, 3))),
                lengths=cfg.segment_lengths,
                shape=BackboneShape(s=s_grid, points=full),
            )
        )
    return out


def test_evaluate_shape_rmse_zero_and_noise(rng):
    cfg = RobotConfig(n_segments=1)
    model = small_model(rng, cfg)
    # truth manufactured from the model's own batched predictions: RMSE 0
    q = rng.uniform(cfg.q_min, cfg.q_max, size=(20, 2))
    pred = predict_shape_batch(model, q, cfg)
    res = evaluate_shape_rmse(model, make_samples_with_points(cfg, q, pred), cfg)
    assert np.all(res.rmse_mm == 0.0)
    assert res.n_samples == 20

    sigma = 0.002
    big_q = rng.uniform(cfg.q_min, cfg.q_max, size=(400, 2))
    base = predict_shape_batch(model, big_q, cfg)
    noisy_pts = base + rng.normal(0.0, sigma, size=base.shape)
    res = evaluate_shape_rmse(
        model, make_samples_with_points(cfg, big_q, noisy_pts), cfg
    )
    assert np.allclose(res.rmse_mm, sigma * 1000.0, rtol=0.05)
    assert np.allclose(res.std_mm, sigma * 1000.0, rtol=0.05)
    assert [row[0] for row in res.as_rows()] == ["x", "y", "z"]


def test_rollout_action_tensor_matches_array_path(rng):
    cfg = RobotConfig(n_segments=2)
    model = perturbed_model(rng, cfg, solver="rk4", steps_per_segment=5)
    q = rng.uniform(cfg.q_min, cfg.q_max, size=(4, 4))
    tape = Tape()
    ro_arr = rollout_shape(model, cfg, tape, q)
    ro_ten = rollout_shape(model, cfg, tape, tape.tensor(q))
    for pa, pt in zip(ro_arr.points, ro_ten.points):
        assert np.array_equal(pa.value, pt.value)


def test_rollout_action_gradient_fd(rng):
    # rows both inside and beyond the curvature clamp, away from the edge
    cfg = RobotConfig(n_segments=2)
    model = perturbed_model(rng, cfg, solver="rk4", steps_per_segment=3)
    q = np.array(
        [
            [1.0, 2.0, -3.0, 4.0],
            [14.0, 8.0, -12.0, 10.0],
        ]
    )

    def total_of(points):
        out = None
        for p in points:
            term = ad.reduce_sum(p)
            out = term if out is None else ad.add(out, term)
        return out

    tape = Tape()
    qt = tape.tensor(q)
    loss = total_of(rollout_shape(model, cfg, tape, qt).points)
    grad = ad.grad_of(ad.backward(loss), qt)
    assert grad.shape == q.shape

    def value_loss(q_arr):
        t = Tape()
        ro = rollout_shape(model, cfg, t, q_arr)
        return float(sum(p.value.sum() for p in ro.points))

    fd = np.zeros_like(q)
    eps = 1e-6
    for i in range(q.shape[0]):
        for j in range(q.shape[1]):
            qp = q.copy()
            qp[i, j] += eps
            qm = q.copy()
            qm[i, j] -= eps
            fd[i, j] = (value_loss(qp) - value_loss(qm)) / (2 * eps)
    assert rel_err(grad, fd) < 1e-5
