import numpy as np
import pytest

from sdfshade import brdf
from sdfshade.scene import DirectionalLight, EnvironmentMap


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_hemisphere_dirs(rng, n, normal=(0, 0, 1)):
    d = rng.normal(size=(n, 3))
    d = unit(d)
    d[:, 2] = np.abs(d[:, 2]) + 1e-3
    return unit(d)


def hemisphere_quadrature(f, n_theta=400, n_phi=256):
    """Independent oracle: product Gauss-Legendre on the hemisphere."""
    tn, tw = np.polynomial.legendre.leggauss(n_theta)
    theta = (tn + 1) * np.pi / 4
    wt = tw * np.pi / 4
    phi = (np.arange(n_phi) + 0.5) / n_phi * 2 * np.pi
    wp = 2 * np.pi / n_phi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    vals = f(th, ph)
    w = (wt[:, None] * wp) * np.sin(th)
    return float(np.sum(vals * w))


class TestFresnel:
    def test_normal_incidence_returns_f0(self):
        assert brdf.fresnel_schlick(0.04, 1.0) == pytest.approx(0.04)

    def test_grazing_limit_is_one(self):
        out = brdf.fresnel_schlick(np.array([0.1, 0.5, 0.9]), 0.0)
        assert np.allclose(out, 1.0)

    def test_half_cosine_hand_value(self):
        # F0 = 0: F = (1 - 0.5)^5 = 0.03125
        assert brdf.fresnel_schlick(0.0, 0.5) == pytest.approx(0.03125)

    def test_monotone_nonincreasing_in_cosine(self):
        c = np.linspace(0, 1, 100)
        f = brdf.fresnel_schlick(0.2, c)
        assert np.all(np.diff(f) <= 1e-15)


class TestHalfVector:
    def test_idempotent_on_equal_dirs(self):
        v = unit([0.3, -0.2, 0.93])
        assert np.allclose(brdf.half_vector(v, v), v, atol=1e-12)

    def test_orthogonal_pair(self):
        h = brdf.half_vector([1.0, 0, 0], [0, 1.0, 0])
        assert np.allclose(h, [1 / np.sqrt(2), 1 / np.sqrt(2), 0])

    def test_bisector_property(self):
        rng = np.random.default_rng(0)
        wi = unit(rng.normal(size=(100, 3)))
        wo = unit(rng.normal(size=(100, 3)))
        keep = np.linalg.norm(wi + wo, axis=-1) > 1e-3
        h = brdf.half_vector(wi[keep], wo[keep])
        assert np.allclose(np.sum(h * wi[keep], -1), np.sum(h * wo[keep], -1),
                           atol=1e-12)

    def test_antiparallel_raises(self):
        with pytest.raises(brdf.DegenerateDirectionError):
            brdf.half_vector([0, 0, 1.0], [0, 0, -1.0])


class TestGgx:
    def test_d_at_normal_incidence_unit_roughness(self):
        assert brdf.ggx_D(1.0, 1.0) == pytest.approx(1 / np.pi, rel=1e-12)

    def test_g1_at_zero_angle_is_one(self):
        for alpha in (0.05, 0.3, 1.0):
            assert brdf.ggx_G1(1.0, alpha) == pytest.approx(1.0, rel=1e-12)

    def test_g1_range_and_d_nonnegative(self):
        rng = np.random.default_rng(1)
        c = rng.uniform(0, 1, 1000)
        a = rng.uniform(0.01, 1, 1000)
        g = brdf.ggx_G1(c, a)
        assert np.all((g > 0) & (g <= 1.0 + 1e-12))
        assert np.all(brdf.ggx_D(c, a) >= 0)

    def test_expanded_form_matches_trig_form(self):
        # the expanded dot-product forms must agree with the tan/cos forms
        rng = np.random.default_rng(2)
        theta = rng.uniform(1e-3, np.pi / 2 - 1e-3, 500)
        alpha = rng.uniform(0.02, 1.0, 500)
        c = np.cos(theta)
        tan2 = np.tan(theta) ** 2
        d_trig = alpha ** 2 / (np.pi * c ** 4 * (alpha ** 2 + tan2) ** 2)
        g_trig = 2.0 / (1.0 + np.sqrt(1.0 + alpha ** 2 * tan2))
        assert np.allclose(brdf.ggx_D(c, alpha), d_trig, rtol=1e-12)
        assert np.allclose(brdf.ggx_G1(c, alpha), g_trig, rtol=1e-12)

    @pytest.mark.parametrize("alpha", [0.1, 0.5, 1.0])
    def test_d_normalization(self, alpha):
        integral = hemisphere_quadrature(
            lambda th, ph: brdf.ggx_D(np.cos(th), alpha) * np.cos(th))
        assert integral == pytest.approx(1.0, rel=0.01)


class TestBeckmannAndTorranceSparrow:
    def test_beckmann_g1_zero_angle_limit(self):
        assert brdf.beckmann_G1(1.0, 0.5) == pytest.approx(1.0)
        assert brdf.beckmann_G1(0.9999999, 0.3) == pytest.approx(1.0, abs=1e-6)

    def test_beckmann_d_normalization(self):
        integral = hemisphere_quadrature(
            lambda th, ph: brdf.beckmann_D(np.cos(th), 0.5) * np.cos(th))
        assert integral == pytest.approx(1.0, rel=0.02)

    def test_torrance_sparrow_g_aligned(self):
        # m = n and both directions at normal incidence: min(1, 2, 2) = 1
        assert brdf.torrance_sparrow_G(1.0, 1.0, 1.0, 1.0, 1.0) \
            == pytest.approx(1.0)

    def test_torrance_sparrow_d_normalized_by_construction(self):
        integral = hemisphere_quadrature(
            lambda th, ph: brdf.torrance_sparrow_D(np.cos(th), 0.5)
            * np.cos(th))
        assert integral == pytest.approx(1.0, rel=0.01)


class TestBrdfEval:
    def test_lambertian_diffuse_term(self):
        p = brdf.BrdfParams([0.5, 0.5, 0.5], 0.0, 1.0)
        out = brdf.brdf_eval(unit([0.2, 0, 1]), unit([-0.3, 0.1, 1]),
                             [0, 0, 1.0], p, components="diffuse")
        assert np.allclose(out, 0.5 / np.pi)

    def test_metal_has_no_diffuse(self):
        p = brdf.BrdfParams([0.9, 0.6, 0.2], 1.0, 0.4)
        rng = np.random.default_rng(3)
        wi = random_hemisphere_dirs(rng, 50)
        wo = random_hemisphere_dirs(rng, 50)
        out = brdf.brdf_eval(wi, wo, [0, 0, 1.0], p, components="diffuse")
        assert np.all(out == 0)

    def test_below_hemisphere_is_zero(self):
        p = brdf.BrdfParams([0.5, 0.5, 0.5], 0.0, 0.5)
        out = brdf.brdf_eval(unit([0, 0, -1]), unit([0, 0.1, 1]),
                             [0, 0, 1.0], p)
        assert np.all(out == 0)

    def test_finite_nonnegative(self):
        rng = np.random.default_rng(4)
        p = brdf.BrdfParams(rng.uniform(0, 1, (200, 3)),
                            rng.uniform(0, 1, 200), rng.uniform(0.01, 1, 200))
        wi = random_hemisphere_dirs(rng, 200)
        wo = random_hemisphere_dirs(rng, 200)
        for model in brdf.MICROFACET_MODELS:
            pm = p if model != "torrance_sparrow" else brdf.BrdfParams(
                p.base_color, p.metalness, 0.5)
            out = brdf.brdf_eval(wi, wo, [0, 0, 1.0], pm, model=model)
            assert np.all(np.isfinite(out))
            assert np.all(out >= 0)

    @pytest.mark.parametrize("model", brdf.MICROFACET_MODELS)
    def test_reciprocity(self, model):
        rng = np.random.default_rng(5)
        wi = random_hemisphere_dirs(rng, 1000)
        wo = random_hemisphere_dirs(rng, 1000)
        rough = 0.4 if model == "torrance_sparrow" else \
            rng.uniform(0.02, 1.0, 1000)
        p = brdf.BrdfParams(rng.uniform(0.05, 1, (1000, 3)),
                            rng.uniform(0, 1, 1000), rough,
                            dielectric_specular_scale=1.0)
        a = brdf.brdf_eval(wi, wo, [0, 0, 1.0], p, model=model)
        b = brdf.brdf_eval(wo, wi, [0, 0, 1.0], p, model=model)
        rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)),
                                         1e-300)
        assert np.max(rel) < 1e-12

    def test_diffuse_only_furnace_integrates_to_reflectance(self):
        p = brdf.BrdfParams([1.0, 1.0, 1.0], 0.0, 1.0)
        wo = unit([0.3, -0.1, 0.8])

        def f(th, ph):
            wi = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph),
                           np.cos(th)], axis=-1)
            val = brdf.brdf_eval(wi, wo, [0, 0, 1.0], p,
                                 components="diffuse")[..., 0]
            return val * np.cos(th)

        assert hemisphere_quadrature(f) == pytest.approx(1.0, rel=0.01)

    def test_full_furnace_bounded(self):
        # with the paper-style unit dielectric F0 the specular lobe adds at
        # most another unit of energy on top of the diffuse reflectance
        p = brdf.BrdfParams([1.0, 1.0, 1.0], 0.0, 1.0)
        wo = unit([0.0, 0.2, 0.9])

        def f(th, ph):
            wi = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph),
                           np.cos(th)], axis=-1)
            return brdf.brdf_eval(wi, wo, [0, 0, 1.0], p)[..., 0] * np.cos(th)

        total = hemisphere_quadrature(f)
        assert 1.0 <= total <= 2.0


class TestShadeDirectional:
    def test_light_below_horizon_black(self):
        p = brdf.BrdfParams([0.5, 0.5, 0.5], 0.0, 0.5)
        light = DirectionalLight((0, 0, -1.0), (1, 1, 1))
        out = brdf.shade_directional(p, [0, 0, 1.0], unit([0, 0.1, 1]), light)
        assert np.all(out == 0)

    def test_lambertian_head_on(self):
        # light and view along the normal: the Fresnel cosine is 1, so with a
        # zero dielectric scale the specular term vanishes exactly
        rho = np.array([0.8, 0.5, 0.25])
        p = brdf.BrdfParams(rho, 0.0, 1.0, dielectric_specular_scale=0.0)
        light = DirectionalLight((0, 0, 1.0), (1.0, 1.0, 1.0))
        out = brdf.shade_directional(p, [0, 0, 1.0], [0, 0, 1.0], light)
        assert np.allclose(out, rho / np.pi, atol=1e-12)

    def test_linear_in_radiance(self):
        p = brdf.BrdfParams([0.5, 0.4, 0.3], 0.3, 0.4)
        n = unit([0.1, 0.1, 1.0])
        wo = unit([-0.2, 0.3, 1.0])
        l1 = DirectionalLight((0.3, 0.1, 0.9), (1.0, 0.5, 0.25))
        l2 = DirectionalLight((0.3, 0.1, 0.9), (2.0, 1.0, 0.5))
        a = brdf.shade_directional(p, n, wo, l1)
        b = brdf.shade_directional(p, n, wo, l2)
        assert np.allclose(b, 2 * a, rtol=1e-12)


class TestShadeEnvironment:
    def test_black_environment(self):
        env = EnvironmentMap.constant((0, 0, 0), sample_count=8)
        p = brdf.BrdfParams([0.5, 0.5, 0.5], 0.0, 0.5)
        out = brdf.shade_environment(p, unit([0, 0, 1.0]), unit([0, 0, 1.0]),
                                     env)
        assert np.all(out == 0)

    def test_lambertian_furnace_identity(self):
        # cosine-weighted sampling makes the constant-environment Lambertian
        # estimate exact, not just unbiased
        env = EnvironmentMap.constant((2.0, 1.0, 0.5), sample_count=16)
        rho = np.array([0.6, 0.8, 1.0])
        p = brdf.BrdfParams(rho, 0.0, 1.0)
        n = unit([0.3, -0.4, 0.9])
        out = brdf.shade_environment(p, n, n, env, components="diffuse")
        assert np.allclose(out, rho * np.array([2.0, 1.0, 0.5]), rtol=1e-12)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(0)
        env = EnvironmentMap(rng.uniform(0, 2, (8, 16, 3)), sample_count=32)
        p = brdf.BrdfParams([0.5, 0.5, 0.5], 0.2, 0.4)
        n = unit([0.2, 0.1, 1.0])
        a = brdf.shade_environment(p, n, n, env, seed=9)
        b = brdf.shade_environment(p, n, n, env, seed=9)
        c = brdf.shade_environment(p, n, n, env, seed=10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_variance_shrinks_with_sample_count(self):
        # plain Monte Carlo: 4x the samples roughly halves the estimator
        # standard deviation
        rng = np.random.default_rng(1)
        pixels = rng.uniform(0.0, 2.0, (8, 16, 3))
        p = brdf.BrdfParams([0.9, 0.9, 0.9], 0.0, 0.2)
        n = unit([0.0, 0.3, 1.0])

        def stddev(m):
            env = EnvironmentMap(pixels, sample_count=m)
            vals = [brdf.shade_environment(p, n, n, env, seed=s,
                                           point_ids=np.asarray(s))[0]
                    for s in range(40)]
            return np.std(vals)

        ratio = stddev(32) / stddev(128)
        assert 1.4 < ratio < 2.9


class TestEvalCounter:
    def test_counts_batched_evaluations(self):
        brdf.reset_eval_count()
        rng = np.random.default_rng(2)
        p = brdf.BrdfParams([0.5, 0.5, 0.5], 0.0, 0.5)
        wi = random_hemisphere_dirs(rng, 37)
        brdf.brdf_eval(wi, unit([0, 0, 1.0]), [0, 0, 1.0], p)
        assert brdf.get_eval_count() == 37
