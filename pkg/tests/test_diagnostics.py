import numpy as np
import pytest

from conftest import ramp_grid, random_grid
from voxgrad.diagnostics import (
    TRACE_COLUMNS,
    CircleScene,
    RayTrace2D,
    continuity_trials,
    glitch_metric,
    glitch_ray,
    glitch_study,
    probe_junction,
    random_face_point,
    trace_ray_2d,
)
from voxgrad.errors import FaceOnBoundary, NoIntersection
from voxgrad.fileio import read_csv
from voxgrad.sdf_grid import SdfGrid


def flat_trace(w, cell):
    n = len(w)
    z = np.zeros(n)
    return RayTrace2D(np.arange(n, dtype=float), z, z, z, z, z, np.asarray(w, float), np.asarray(w, float), np.asarray(cell))


class TestProbe:
    def test_ramp_all_limits_equal(self):
        g = ramp_grid(5)  # f = x over [-1, 1]^3
        p = probe_junction(g, (0, 2), [0.0, 0.3, -0.2])
        for v in (p.analytical_left, p.analytical_right, p.interpolated_left, p.interpolated_right):
            np.testing.assert_allclose(v, [1, 0, 0], atol=1e-12)

    def test_corner_partition(self, rng):
        g = random_grid(rng, 5)
        p = probe_junction(g, (1, 2), [0.1, 0.0, 0.3])
        assert len(p.v_a) == 4 and len(p.v_b) == 4 and len(p.v_b_prime) == 4
        assert not set(p.v_b) & set(p.v_b_prime)
        assert not set(p.v_a) & (set(p.v_b) | set(p.v_b_prime))

    @pytest.mark.parametrize("seed", range(5))
    def test_interpolated_continuous_analytical_not(self, seed):
        rng = np.random.default_rng(seed)
        g = random_grid(rng, 6)
        face, x = random_face_point(g, rng)
        p = probe_junction(g, face, x)
        assert p.interpolated_gap <= 1e-9
        assert p.analytical_gap > 1e-3

    def test_gap_only_in_normal_component(self, rng):
        g = random_grid(rng, 6)
        for _ in range(10):
            face, x = random_face_point(g, rng)
            p = probe_junction(g, face, x)
            gap = p.analytical_right - p.analytical_left
            tangent = [k for k in range(3) if k != face[0]]
            np.testing.assert_allclose(gap[tangent], 0, atol=1e-12)

    def test_normal_gap_matches_second_difference(self, rng):
        # the jump in d/du_axis equals the bilinear blend on the face of
        # (f[+1] - 2 f[0] + f[-1]) / eps over the off-face corners
        g = random_grid(rng, 5)
        x = np.array([-1 + 2 * 0.5, -1 + 1.3 * 0.5, -1 + 2.6 * 0.5])  # face u0 = 2
        p = probe_junction(g, (0, 2), x)
        f = g.values
        fy, fz = 0.3, 0.6
        expected = 0.0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dz, wz in ((0, 1 - fz), (1, fz)):
                j, k = 1 + dy, 2 + dz
                expected += wy * wz * (f[3, j, k] - 2 * f[2, j, k] + f[1, j, k])
        gap = p.analytical_right[0] - p.analytical_left[0]
        assert gap == pytest.approx(expected / g.spacing, rel=1e-10)

    def test_boundary_face_rejected(self, rng):
        g = random_grid(rng, 5)
        with pytest.raises(FaceOnBoundary):
            probe_junction(g, (2, 0), [0.0, 0.0, -1.0])
        with pytest.raises(FaceOnBoundary):
            probe_junction(g, (2, 4), [0.0, 0.0, 1.0])

    def test_point_off_face_rejected(self, rng):
        g = random_grid(rng, 5)
        with pytest.raises(ValueError):
            probe_junction(g, (0, 2), [0.1, 0.0, 0.0])

    def test_trials(self):
        ga, gi = continuity_trials(100, seed=7)
        assert gi.max() <= 1e-9 and np.mean(ga > 1e-3) >= 0.95

    def test_two_dimensional(self, rng):
        g = SdfGrid(rng.normal(size=(6, 6)), np.zeros(2), 0.2)
        face, x = random_face_point(g, rng)
        p = probe_junction(g, face, x)
        assert len(p.v_a) == 2 and p.interpolated_gap <= 1e-9


class TestTrace:
    def test_missing_ray_zero_alpha(self):
        sc = CircleScene.default()
        g = sc.bake()
        tr = trace_ray_2d(g, [-2.0, 0.95], [1.0, 0.0])
        assert np.all(tr.f > 0)
        assert tr.alpha_a.max() < 1e-4 and tr.alpha_i.max() < 1e-4

    def test_outside_box_raises(self):
        g = CircleScene.default().bake()
        with pytest.raises(NoIntersection):
            trace_ray_2d(g, [-2.0, 3.0], [1.0, 0.0])

    def test_value_column_estimator_independent_and_t_increasing(self):
        sc = CircleScene.default()
        tr = trace_ray_2d(sc.bake(), *glitch_ray(sc, 0.5))
        assert np.all(np.diff(tr.t) > 0)
        np.testing.assert_allclose(tr.f, sc.sdf(glitch_ray(sc, 0.5)[0] + tr.t[:, None] * glitch_ray(sc, 0.5)[1]), atol=0.05)

    def test_csv(self, tmp_path):
        sc = CircleScene.default()
        tr = trace_ray_2d(sc.bake(), *glitch_ray(sc))
        tr.write_csv(tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
        d = read_csv(tmp_path / "t.csv")
        np.testing.assert_allclose(d["w_i"], tr.w_i, rtol=1e-8, atol=1e-12)

    def test_interpolated_cos_continuous_under_refinement(self):
        sc = CircleScene.default()
        g = sc.bake()
        o, d = glitch_ray(sc, 0.95)
        jumps = []
        for n in (256, 512):
            tr = trace_ray_2d(g, o, d, n)
            cross = tr.cell[1:] != tr.cell[:-1]
            jumps.append(np.abs(np.diff(tr.cos_i))[cross].max())
        assert jumps[1] < 0.6 * jumps[0]


class TestGlitchMetric:
    def test_constant(self):
        assert glitch_metric(flat_trace(np.full(20, 0.3), np.arange(20))) == 0

    def test_arithmetic(self):
        w = np.full(20, 0.2)
        w[10:] = 0.4
        assert glitch_metric(flat_trace(w, np.arange(20))) == pytest.approx(0.5)

    def test_jump_inside_cell_ignored(self):
        w = np.full(20, 0.2)
        w[10:] = 0.4
        assert glitch_metric(flat_trace(w, np.zeros(20, int))) == 0

    def test_too_short(self):
        with pytest.raises(ValueError):
            glitch_metric(flat_trace(np.ones(8), np.arange(8)))

    def test_study_direction(self):
        out, _, _ = glitch_study()
        assert out["ratio"] > 5
        assert out["refinement_shrink"] >= 2.0
