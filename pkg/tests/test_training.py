import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff
from voxgrad.errors import ShapeMismatch
from voxgrad.fileio import read_csv
from voxgrad.scenes import builtin_scene
from voxgrad.training import (
    METRIC_COLUMNS,
    AdamState,
    Dataset,
    Schedules,
    TrainConfig,
    amplify_s_gradient,
    config_from_dict,
    dense_adam_step,
    desk_config,
    init_state,
    load_checkpoint,
    loss,
    psnr,
    resolution_at,
    save_checkpoint,
    schedule_tick,
    sparse_adam_step,
    train,
    weights_at,
)

TINY_RADIANCE = {"n_levels": 2, "table_size": 512, "n_min": 4, "n_max": 8, "hidden": 8}


def tiny_config(steps=6, **kw) -> TrainConfig:
    sched = Schedules(total_steps=steps, milestones=[[0, 12], [3, 16]], w_mask=0.1)
    base = dict(n_views=4, width=24, height=24, batch_rays=48, n_samples=12, radiance=TINY_RADIANCE, schedules=sched)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def sphere_data():
    cfg = tiny_config()
    return Dataset.render(builtin_scene("sphere"), cfg.n_views, cfg.width, cfg.height)


# --- loss ---------------------------------------------------------------------


class TestLoss:
    def test_zero_when_predictions_match(self, rng):
        c = rng.uniform(size=(10, 3))
        total, d, d_op, parts = loss(c, c)
        assert total == 0.0 and parts["L_RGB"] == 0.0 and d_op is None

    def test_zero_mask_weight_matches_no_mask_call(self, rng):
        pred, target = rng.uniform(size=(2, 10, 3))
        op, mask = rng.uniform(size=10), rng.integers(0, 2, 10)
        a = loss(pred, target)
        b = loss(pred, target, op, mask, w_mask=0.0)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])
        assert b[2] is None

    def test_gradients_match_finite_differences(self, rng):
        pred, target = rng.uniform(size=(2, 8, 3))
        op = rng.uniform(0.1, 0.9, 8)
        mask = rng.integers(0, 2, 8).astype(float)
        _, d_color, d_op, _ = loss(pred, target, op, mask, w_mask=0.3)
        fd_color = central_diff(lambda p: loss(p, target, op, mask, 0.3)[0], pred, 1e-7)
        fd_op = central_diff(lambda o: loss(pred, target, o, mask, 0.3)[0], op, 1e-7)
        np.testing.assert_allclose(d_color, fd_color, rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(d_op, fd_op, rtol=1e-5, atol=1e-9)

    def test_clamped_opacity_passes_no_gradient(self):
        _, _, d_op, _ = loss(np.zeros((2, 3)), np.ones((2, 3)), np.array([0.0, 1.0]), np.array([1.0, 0.0]), 1.0)
        np.testing.assert_array_equal(d_op, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            loss(np.zeros((4, 3)), np.zeros((5, 3)))
        with pytest.raises(ShapeMismatch):
            loss(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(4), np.zeros(3), 1.0)

    def test_psnr(self):
        assert psnr(np.zeros(4), np.zeros(4)) == float("inf")
        assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)


# --- s amplification -------------------------------------------------------------


class TestAmplify:
    @pytest.mark.parametrize("g, expected", [(-0.1, -0.5), (0.1, 0.1), (0.0, 0.0)])
    def test_cases(self, g, expected):
        assert amplify_s_gradient(g, 5) == pytest.approx(expected, abs=1e-15)

    def test_rejects_k_below_one(self):
        with pytest.raises(ValueError):
            amplify_s_gradient(0.1, 0.5)

    @given(st.floats(-1e6, 1e6), st.floats(1.0, 100.0))
    def test_keeps_sign_and_never_shrinks(self, g, k):
        out = amplify_s_gradient(g, k)
        assert np.sign(out) == np.sign(g)
        assert abs(out) >= abs(g)


# --- Adam -----------------------------------------------------------------------


class TestSparseAdam:
    def test_zero_gradient_leaves_parameters_bit_identical(self, rng):
        p = rng.normal(size=20)
        before = p.copy()
        state = AdamState.zeros(20, 20)
        sparse_adam_step(p, np.zeros(0, np.int64), np.zeros(0), state, 1e-2)
        np.testing.assert_array_equal(p, before)
        assert not state.count.any()

    def test_first_step_equals_dense(self, rng):
        p = rng.normal(size=5)
        g = rng.normal(size=5)
        dense = dense_adam_step(p.copy(), g, AdamState.zeros(5), 1e-2)
        sparse_adam_step(p, np.arange(5), g, AdamState.zeros(5, 5), 1e-2)
        np.testing.assert_array_equal(p, dense)

    def test_tracks_dense_adam_over_100_steps(self, rng):
        init = rng.normal(size=(30, 2))
        sparse, dense = init.copy(), init[:1].copy()
        s_state, d_state = AdamState.zeros(sparse.shape, 30), AdamState.zeros(dense.shape)
        for _ in range(100):
            g = rng.normal(size=2)
            # row 0 every step, a random handful of others sometimes
            others = rng.choice(np.arange(10, 30), size=int(rng.integers(0, 4)), replace=False)
            ids = np.concatenate([[0], others]).astype(np.int64)
            grads = np.concatenate([g[None], rng.normal(size=(len(others), 2))])
            sparse_adam_step(sparse, ids, grads, s_state, 1e-2)
            dense = dense_adam_step(dense, g[None], d_state, 1e-2)
        np.testing.assert_allclose(sparse[0], dense[0], atol=1e-7, rtol=0)
        # rows 1..9 were never touched
        np.testing.assert_array_equal(sparse[1:10], init[1:10])
        assert s_state.count[0] == 100 and not s_state.count[1:10].any()


# --- schedules ------------------------------------------------------------------


class TestSchedules:
    def test_endpoints(self):
        s = Schedules(total_steps=3000)
        w_eik, w_curv, res = schedule_tick(s, 0)
        assert (w_eik, w_curv, res) == (1e-2, 1e-8, 32)
        assert weights_at(s, s.ramp_end)[1] == pytest.approx(5e-6, rel=1e-12)
        assert weights_at(s, s.ramp_end)[0] == pytest.approx(1e-3, rel=1e-12)
        assert schedule_tick(s, 2999)[1] == pytest.approx(5e-7, rel=1e-2)

    def test_milestones_emit_resolution_once(self):
        s = Schedules(total_steps=3000)
        events = {step: schedule_tick(s, step)[2] for step in (0, 1, 999, 1000, 1001, 2000)}
        assert events == {0: 32, 1: None, 999: None, 1000: 64, 1001: None, 2000: 96}
        assert resolution_at(s, 1500) == 64

    @given(st.floats(0.0, 1.0), st.floats(1e-9, 1e-4))
    @settings(max_examples=200)
    def test_weights_are_continuous(self, p, dp):
        s = Schedules()
        a, b = weights_at(s, p), weights_at(s, min(p + dp, 1.0))
        # Lipschitz bound from the steepest (linear) segment
        slope_eik = (s.w_eik_start - s.w_eik_end) / (s.ramp_end - s.hold_end)
        slope_curv = s.w_curv_peak / (s.ramp_end - s.hold_end) * 10
        assert abs(a[0] - b[0]) <= slope_eik * dp * (1 + 1e-9) + 1e-15
        assert abs(a[1] - b[1]) <= slope_curv * dp * (1 + 1e-9) + 1e-15

    @pytest.mark.parametrize(
        "kw",
        [
            {"milestones": [[5, 32]]},
            {"milestones": [[0, 32], [0, 64]]},
            {"milestones": [[0, 64], [10, 32]]},
            {"k": 0.5},
            {"w_eik_start": -1.0},
            {"hold_end": 0.8, "ramp_end": 0.5},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Schedules(**kw)


# --- configuration ------------------------------------------------------------


class TestConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config"):
            config_from_dict({"scene": "sphere", "batchrays": 3})
        with pytest.raises(ValueError, match="unknown schedule"):
            config_from_dict({"schedules": {"w_eik": 1.0}})

    def test_deterministic_forces_one_thread(self):
        assert TrainConfig(threads=4, deterministic=True).threads == 1

    def test_roundtrip_through_json(self):
        cfg = desk_config("textured_box", steps=50, seed=3)
        back = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.to_dict() == cfg.to_dict()

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            TrainConfig(gradient="sobel")
        with pytest.raises(TypeError):
            TrainConfig(radiance={"levels": 3})


# --- training loop -----------------------------------------------------------


def _state_arrays(state):
    out = [state.grid.values, state.params.tables, *state.params.layers, np.float64(state.log_s)]
    out += [state.adam_grid.m, state.adam_grid.v, state.adam_tables.m]
    return out


class TestTrain:
    def test_zero_steps_state_equals_init(self, sphere_data):
        scene = builtin_scene("sphere")
        cfg = tiny_config(steps=0)
        state, rows = train(scene, cfg, data=sphere_data)
        ref = init_state(scene, cfg)
        assert rows == [] and state.step == 0
        for a, b in zip(_state_arrays(state), _state_arrays(ref)):
            np.testing.assert_array_equal(a, b)

    def test_identical_seeds_give_identical_logs(self, sphere_data):
        scene = builtin_scene("sphere")
        cfg = tiny_config(deterministic=True)
        _, a = train(scene, cfg, data=sphere_data)
        _, b = train(scene, cfg, data=sphere_data)
        assert a == b
        _, c = train(scene, tiny_config(deterministic=True, seed=1), data=sphere_data)
        assert a != c

    def test_estimators_differ(self, sphere_data):
        scene = builtin_scene("sphere")
        s_i, _ = train(scene, tiny_config(steps=3), data=sphere_data)
        s_a, _ = train(scene, tiny_config(steps=3, gradient="analytical"), data=sphere_data)
        assert not np.array_equal(s_i.grid.values, s_a.grid.values)

    def test_upsample_resets_grid_moments(self, sphere_data):
        state, _ = train(builtin_scene("sphere"), tiny_config(), data=sphere_data, until=4)
        assert state.grid.resolution == (16, 16, 16)
        assert state.adam_grid.count.max() == 1  # one step since the reset at step 3

    def test_only_touched_vertices_move(self, sphere_data):
        scene = builtin_scene("sphere")
        cfg = tiny_config(steps=2)
        init = init_state(scene, cfg)
        state, _ = train(scene, cfg, data=sphere_data)
        moved = state.grid.values != init.grid.values
        touched = state.adam_grid.count.reshape(moved.shape) > 0
        assert moved.any()
        assert not (moved & ~touched).any()

    def test_resume_matches_uninterrupted_run(self, sphere_data, tmp_path):
        scene = builtin_scene("sphere")
        cfg = tiny_config(deterministic=True)
        _, full = train(scene, cfg, data=sphere_data)
        part, first = train(scene, cfg, data=sphere_data, until=4)
        save_checkpoint(part, cfg, tmp_path / "ckpt")
        state, cfg2 = load_checkpoint(tmp_path / "ckpt")
        assert cfg2.to_dict() == cfg.to_dict()
        _, rest = train(scene, cfg2, state=state, data=sphere_data)
        assert first + rest == full

    def test_writes_metrics_and_checkpoint(self, sphere_data, tmp_path):
        cfg = tiny_config(steps=3, out=str(tmp_path / "run"))
        state, rows = train(builtin_scene("sphere"), cfg, data=sphere_data)
        log = read_csv(tmp_path / "run" / "metrics.csv")
        assert list(log) == METRIC_COLUMNS
        np.testing.assert_array_equal(log["step"], [0, 1, 2])
        np.testing.assert_allclose(log["L_RGB"], [r["L_RGB"] for r in rows], rtol=1e-8)
        back, _ = load_checkpoint(tmp_path / "run" / "final")
        np.testing.assert_array_equal(back.grid.values, state.grid.values)
        assert back.step == 3


@pytest.mark.parametrize("scene_name", ["sphere", "textured_box", "textured_plane", "torus"])
def test_loss_decreases(scene_name):
    """Median L_RGB over the last 20% of steps is below that of the first 5%."""
    scene = builtin_scene(scene_name)
    steps = 60
    cfg0 = desk_config(scene_name, steps=steps, n_views=8, width=48, height=48, batch_rays=192, n_samples=32)
    data = Dataset.render(scene, cfg0.n_views, cfg0.width, cfg0.height)
    for seed in (0, 1, 2):
        cfg = desk_config(scene_name, steps=steps, n_views=8, width=48, height=48, batch_rays=192, n_samples=32, seed=seed)
        _, rows = train(scene, cfg, data=data)
        l_rgb = np.array([r["L_RGB"] for r in rows])
        head = np.median(l_rgb[: max(1, steps // 20)])
        tail = np.median(l_rgb[int(0.8 * steps) :])
        assert tail < head, f"{scene_name} seed {seed}: {tail:.4f} !< {head:.4f}"
