import numpy as np
import pytest

from sdfshade import fields, kernels, volren
from sdfshade.scene import Camera, DirectionalLight, RenderConfig


class TestOpacity:
    def test_surface_value_exact(self):
        assert volren.opacity(0.0, 100.0, 0.02) == 50.0
        assert volren.opacity(0.0, 7.0, 0.1) == 3.5

    def test_deep_inside_saturates(self):
        a, b = 100.0, 0.02
        assert volren.opacity(-10 * b, a, b) == \
            pytest.approx(a * (1 - np.exp(-10) / 2), rel=1e-12)

    def test_far_outside_vanishes(self):
        a, b = 100.0, 0.02
        assert volren.opacity(10 * b, a, b) == \
            pytest.approx(a / 2 * np.exp(-10), rel=1e-12)

    def test_monotone_nonincreasing_sweep(self):
        s = np.linspace(-1.0, 1.0, 10000)
        sig = volren.opacity(s, 100.0, 0.02)
        assert np.all(np.diff(sig) <= 0)

    def test_derivative_continuous_at_zero(self):
        a, b = 100.0, 0.02
        d0 = volren.opacity_derivative(0.0, a, b)
        assert d0 == pytest.approx(-a / (2 * b))
        eps = 1e-9
        assert volren.opacity_derivative(eps, a, b) == pytest.approx(d0,
                                                                     rel=1e-6)
        assert volren.opacity_derivative(-eps, a, b) == pytest.approx(d0,
                                                                      rel=1e-6)


class TestSampleRay:
    def cam(self):
        return Camera((0, 2.7, 0.2), (0, 0, 0), (0, 0, 1), 0.7, 33, 33)

    def test_uniform_spacing_without_jitter(self):
        cfg = RenderConfig(n_ray=64, jitter=False)
        rs = volren.sample_ray(self.cam(), (16, 16), cfg)
        expect = (rs.far - rs.near) / 64
        assert np.allclose(np.diff(rs.t), expect, atol=1e-12)
        assert np.allclose(rs.delta, expect)

    def test_samples_within_bounds(self):
        cfg = RenderConfig(n_ray=32, jitter=True, seed=4)
        rs = volren.sample_ray(self.cam(), (3, 20), cfg)
        assert np.all(rs.t >= rs.near)
        assert np.all(rs.t <= rs.far)
        assert np.all(np.diff(rs.t) > 0)

    def test_one_sample_per_stratum(self):
        cfg = RenderConfig(n_ray=48, jitter=True, seed=9)
        rs = volren.sample_ray(self.cam(), (7, 8), cfg)
        strata = np.floor((rs.t - rs.near) / rs.delta[0]).astype(int)
        assert np.array_equal(strata, np.arange(48))

    def test_deterministic_per_seed_and_pixel(self):
        cfg = RenderConfig(n_ray=16, jitter=True, seed=1)
        a = volren.sample_ray(self.cam(), (5, 6), cfg)
        b = volren.sample_ray(self.cam(), (5, 6), cfg)
        c = volren.sample_ray(self.cam(), (6, 5), cfg)
        assert np.array_equal(a.t, b.t)
        assert not np.array_equal(a.t, c.t)

    def test_miss_ray_has_no_samples(self):
        cfg = RenderConfig(n_ray=16, bound_radius=0.1)
        rs = volren.sample_ray(self.cam(), (0, 0), cfg)
        assert rs.t.size == 0


class TestComposite:
    def test_empty_space(self):
        vals = np.ones((10, 3))
        out, alpha, w = volren.composite(vals, np.zeros(10), np.full(10, 0.1))
        assert np.all(out == 0)
        assert alpha == 0
        assert np.all(w == 0)

    def test_single_opaque_sample(self):
        vals = np.array([[2.0, 3.0, 4.0]])
        out, alpha, _ = volren.composite(vals, np.array([400.0]),
                                         np.array([0.1]))
        assert np.allclose(out, vals[0], rtol=1e-12)
        assert alpha == pytest.approx(1.0, abs=1e-15)

    def test_homogeneous_medium_closed_form(self):
        # constant opacity over total length L composites to 1 - exp(-sigma L)
        sigma, length, n = 7.0, 1.3, 64
        delta = np.full(n, length / n)
        vals = np.ones((n, 1))
        _, alpha, _ = volren.composite(vals, np.full(n, sigma), delta)
        assert alpha == pytest.approx(1 - np.exp(-sigma * length), rel=1e-12)

    def test_weight_partition(self):
        rng = np.random.default_rng(0)
        sig = rng.uniform(0, 50, (20, 32))
        delta = rng.uniform(0.01, 0.05, (20, 32))
        vals = rng.normal(size=(20, 32, 2))
        _, alpha, w = volren.composite(vals, sig, delta)
        assert np.all(w >= 0)
        assert np.all(alpha <= 1 + 1e-12)
        assert np.allclose(np.sum(w, -1), alpha)


class TestRenderField:
    def setup_method(self):
        self.sdf = fields.SphereSdf(0.5)
        self.cam = Camera((2.7, 0, 0), (0, 0, 0), (0, 0, 1), 0.7, 33, 33)
        self.cfg = RenderConfig(n_ray=96, jitter=False, bound_radius=0.9,
                                tile_size=16)

    def test_constant_field_saturates(self):
        const = lambda pts: np.broadcast_to(np.array([0.25, 0.5, 0.75]),
                                            pts.shape[:-1] + (3,))
        img = volren.render_field(const, self.sdf, self.cam, self.cfg)
        center = img.planes["value"][16, 16]
        assert np.allclose(center, [0.25, 0.5, 0.75], atol=1e-3)

    def test_background_empty(self):
        const = lambda pts: np.ones(pts.shape[:-1] + (1,))
        img = volren.render_field(const, self.sdf, self.cam, self.cfg)
        assert img.planes["value"][0, 0] == pytest.approx(0.0, abs=1e-3)
        assert img.planes["alpha"][0, 0] < 1e-3

    def test_linear_in_field(self):
        rng = np.random.default_rng(1)
        f1 = lambda pts: np.sin(3 * pts[..., :1])
        f2 = lambda pts: np.cos(2 * pts[..., 1:2])
        comb = lambda pts: 2.5 * f1(pts) + f2(pts)
        r1 = volren.render_field(f1, self.sdf, self.cam, self.cfg)
        r2 = volren.render_field(f2, self.sdf, self.cam, self.cfg)
        rc = volren.render_field(comb, self.sdf, self.cam, self.cfg)
        assert np.allclose(rc.planes["value"],
                           2.5 * r1.planes["value"] + r2.planes["value"],
                           atol=1e-6)

    def test_rendered_normal_faces_camera(self):
        img = volren.render_normals(self.sdf, self.cam, self.cfg)
        n = img.planes["normal"][16, 16]
        _, d = self.cam.pixel_ray(16, 16)
        cos = -n @ d
        assert np.rad2deg(np.arccos(np.clip(cos, -1, 1))) < 2.0

    def test_depth_matches_ray_sphere_intersection(self):
        img = volren.render_depth(self.sdf, self.cam, self.cfg)
        span = 2 * np.sqrt(0.9 ** 2 - 0.0)  # chord through bound sphere
        tol = span / self.cfg.n_ray
        assert img.planes["depth"][16, 16] == pytest.approx(2.2, abs=tol)

    def test_empty_scene_mask_zero(self):
        # the exponential opacity is only astronomically small for a surface
        # far outside the marched region, never an exact float zero
        far_sphere = fields.TranslateSdf(fields.SphereSdf(0.5), (10, 0, 0))
        img = volren.render_mask(far_sphere, self.cam,
                                 RenderConfig(n_ray=32, jitter=False))
        assert np.max(img.planes["alpha"]) < 1e-100

    def test_mask_in_unit_range(self):
        img = volren.render_mask(self.sdf, self.cam, self.cfg)
        a = img.planes["alpha"]
        assert a.min() >= 0 and a.max() <= 1 + 1e-12

    def test_quadrature_convergence(self):
        cfg_lo = RenderConfig(n_ray=128, jitter=False, bound_radius=0.9)
        cfg_hi = RenderConfig(n_ray=256, jitter=False, bound_radius=0.9)
        a = volren.render_mask(self.sdf, self.cam, cfg_lo).planes["alpha"]
        b = volren.render_mask(self.sdf, self.cam, cfg_hi).planes["alpha"]
        assert np.max(np.abs(a - b)) < 5e-3


class TestShadedFull:
    def test_zero_lights_black(self, sphere, gray_material, cam48, cfg_fast):
        img = volren.render_shaded_full(sphere, gray_material, [], cam48,
                                        cfg_fast)
        assert np.all(img.planes["shaded"] == 0)

    def test_lambertian_head_on(self, sphere):
        cam = Camera((2.7, 0, 0), (0, 0, 0), (0, 0, 1), 0.7, 33, 33)
        cfg = RenderConfig(n_ray=128, jitter=False, bound_radius=0.8)
        rho = np.array([0.6, 0.4, 0.2])
        mat = fields.ConstantPbr(np.concatenate([rho, [0.0, 1.0]]))
        light = DirectionalLight((1.0, 0, 0), (1, 1, 1))
        img = volren.render_shaded_full(sphere, mat, [light], cam, cfg,
                                        dielectric_specular_scale=0.0)
        # center pixel: n ~ omega_i ~ omega_o, Fresnel cosine 1, diffuse only
        assert np.allclose(img.planes["shaded"][16, 16], rho / np.pi,
                           atol=5e-3)


class TestKernelConsistency:
    def test_grid_paths_agree(self, grid_pair):
        sdf, pbr = grid_pair
        cam = Camera((2.4, 0.5, 0.9), (0, 0, 0), (0, 0, 1), 0.7, 40, 40)
        cfg = RenderConfig(n_ray=48, jitter=True, seed=5, tile_size=16)
        gt_depth = np.full((40, 40), 2.0)
        gt_depth[::3] = 0.0
        ref = volren.march_view(sdf, pbr, cam, cfg, gt_depth=gt_depth,
                                trunc=0.07)
        fast = kernels.view_forward(sdf.values, pbr.values, cam, cfg,
                                    gt_depth=gt_depth, trunc=0.07)
        for key in ("kbar", "nbar", "alpha", "wt"):
            assert np.allclose(ref[key], fast[key], atol=1e-12)
        assert ref["fs_cnt"] == fast["fs_cnt"]
        assert ref["tr_cnt"] == fast["tr_cnt"]
        assert ref["fs_sum"] == pytest.approx(fast["fs_sum"], rel=1e-9)
        assert ref["tr_sum"] == pytest.approx(fast["tr_sum"], rel=1e-9)

    def test_kernel_deterministic_across_threads(self, grid_pair):
        sdf, pbr = grid_pair
        cam = Camera((2.4, 0.5, 0.9), (0, 0, 0), (0, 0, 1), 0.7, 32, 32)
        cfg = RenderConfig(n_ray=32, jitter=True, seed=2, tile_size=8)
        a = kernels.view_forward(sdf.values, pbr.values, cam, cfg, threads=1)
        b = kernels.view_forward(sdf.values, pbr.values, cam, cfg, threads=3)
        for key in ("kbar", "nbar", "alpha", "wt"):
            assert np.array_equal(a[key], b[key])

    def test_backward_deterministic_across_threads(self, grid_pair):
        sdf, pbr = grid_pair
        cam = Camera((2.4, 0.5, 0.9), (0, 0, 0), (0, 0, 1), 0.7, 32, 32)
        cfg = RenderConfig(n_ray=32, jitter=True, seed=2, tile_size=8)
        rng = np.random.default_rng(0)
        seeds = {"kbar": rng.normal(size=(32, 32, 5)),
                 "nbar": rng.normal(size=(32, 32, 3)),
                 "alpha": rng.normal(size=(32, 32)),
                 "wt": rng.normal(size=(32, 32))}
        g1 = kernels.view_backward(sdf.values, pbr.values, cam, cfg, seeds,
                                   threads=1)
        g2 = kernels.view_backward(sdf.values, pbr.values, cam, cfg, seeds,
                                   threads=4)
        assert np.array_equal(g1[0], g2[0])
        assert np.array_equal(g1[1], g2[1])
