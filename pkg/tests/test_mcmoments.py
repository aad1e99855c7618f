"""Tests for the ensemble SDE machinery and the moment closure."""

import numpy as np
import pytest

from mmparareal import engine, mcmoments, smallmat
from oracles import ou_model, ou_moments

RNG = np.random.default_rng(77)


def zero_model(dim=2):
    return mcmoments.SdeModel(
        dim=dim, n_w=1,
        drift=lambda X, lam, t: np.zeros_like(X),
        diffusion=lambda X, lam, t: np.zeros((dim, 1)),
        initial_sampler=lambda P, rng: rng.standard_normal((P, dim)),
        drift_jac=lambda m, lam, t: np.zeros((dim, dim)),
    )


class TestEnsemble:
    def test_needs_two_particles(self):
        with pytest.raises(ValueError):
            mcmoments.Ensemble(np.zeros((1, 2)))

    def test_rejects_non_finite(self):
        with pytest.raises(mcmoments.NonFinite):
            mcmoments.Ensemble(np.array([[0.0, np.nan], [1.0, 2.0]]))

    def test_shape_properties(self):
        ens = mcmoments.Ensemble(np.zeros((5, 3)))
        assert ens.particles == 5 and ens.dim == 3


class TestMomentState:
    def test_symmetrized_exactly(self):
        s = mcmoments.MomentState([0.0, 0.0], [[1.0, 0.3], [0.1, 1.0]])
        assert s.cov[0, 1] == s.cov[1, 0] == 0.2

    def test_psd_flag(self):
        assert mcmoments.MomentState([0.0], [[1.0]]).psd_flag
        assert not mcmoments.MomentState([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]]).psd_flag

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mcmoments.MomentState([0.0, 0.0], [[1.0]])


class TestBrownianTable:
    def test_reproducible_bitwise(self):
        t1 = mcmoments.BrownianTable(seed=5, n_slabs=3, steps=4, particles=10,
                                     n_w=2, inner_dt=0.01)
        t2 = mcmoments.BrownianTable(seed=5, n_slabs=3, steps=4, particles=10,
                                     n_w=2, inner_dt=0.01)
        for n in range(3):
            np.testing.assert_array_equal(t1.increments(n), t2.increments(n))

    def test_subintervals_differ(self):
        t = mcmoments.BrownianTable(seed=5, n_slabs=2, steps=4, particles=10,
                                    n_w=1, inner_dt=0.01)
        assert not np.array_equal(t.increments(0), t.increments(1))

    def test_variance_scaling(self):
        t = mcmoments.BrownianTable(seed=5, n_slabs=1, steps=1, particles=200000,
                                    n_w=1, inner_dt=0.04)
        var = t.increments(0).var()
        assert abs(var - 0.04) < 3 * 0.04 * np.sqrt(2.0 / 200000)

    def test_range_check(self):
        t = mcmoments.BrownianTable(seed=5, n_slabs=2, steps=1, particles=4,
                                    n_w=1, inner_dt=0.01)
        with pytest.raises(IndexError):
            t.increments(2)


class TestEmPropagate:
    def test_zero_dynamics_unchanged(self):
        ens = mcmoments.Ensemble(RNG.standard_normal((50, 2)))
        out = mcmoments.em_propagate(ens, zero_model(), np.zeros((5, 50, 1)), 0.1)
        np.testing.assert_array_equal(out.states, ens.states)

    def test_deterministic_decay(self):
        model = ou_model(rate=1.0, sigma=0.0)
        states = np.linspace(0.5, 2.0, 20)[:, None]
        ens = mcmoments.Ensemble(states)
        out = mcmoments.em_propagate(ens, model, np.zeros((1000, 20, 1)), 1e-3)
        np.testing.assert_allclose(out.states, states * np.exp(-1.0), rtol=1e-3)

    def test_ou_ensemble_mean(self):
        sigma, particles = 0.5, 10000
        model = ou_model(rate=1.0, sigma=sigma, mean0=1.0, std0=0.0)
        ens = mcmoments.Ensemble(np.ones((particles, 1)))
        table = mcmoments.BrownianTable(seed=22, n_slabs=1, steps=100,
                                        particles=particles, n_w=1, inner_dt=0.01)
        out = mcmoments.em_propagate(ens, model, table.increments(0), 0.01)
        mean = out.states.mean()
        band = 3 * sigma / np.sqrt(2 * particles)
        # statistical band around the analytic mean, and a tighter check
        # against the Euler-exact mean (1 - dt)^steps with the bias removed
        assert abs(mean - np.exp(-1.0)) < band
        assert abs(mean - (1.0 - 0.01) ** 100) < band

    def test_mean_field_estimated_from_ensemble(self):
        # drift toward the ensemble mean: a contracting interaction whose
        # fixed point is the (preserved) mean
        model = mcmoments.SdeModel(
            dim=1, n_w=1,
            drift=lambda X, lam, t: lam[0] - X,
            diffusion=lambda X, lam, t: np.zeros((1, 1)),
            initial_sampler=lambda P, rng: rng.standard_normal((P, 1)),
            drift_jac=lambda m, lam, t: np.array([[-1.0]]),
            psi=lambda X: X.copy(),
        )
        states = RNG.standard_normal((100, 1))
        ens = mcmoments.Ensemble(states)
        out = mcmoments.em_propagate(ens, model, np.zeros((500, 100, 1)), 1e-2)
        np.testing.assert_allclose(out.states.mean(), states.mean(), atol=1e-12)
        assert out.states.std() < 0.05 * states.std()

    def test_non_finite_reports_step_and_particle(self):
        model = mcmoments.SdeModel(
            dim=1, n_w=1,
            drift=lambda X, lam, t: X ** 3,
            diffusion=lambda X, lam, t: np.zeros((1, 1)),
            initial_sampler=lambda P, rng: rng.standard_normal((P, 1)),
            drift_jac=lambda m, lam, t: np.zeros((1, 1)),
        )
        ens = mcmoments.Ensemble(np.array([[1.0], [50.0]]))
        with np.errstate(over="ignore"):
            with pytest.raises(mcmoments.NonFinite, match=r"step \d+, particle 1"):
                mcmoments.em_propagate(ens, model, np.zeros((100, 2, 1)), 10.0)

    def test_shape_mismatch(self):
        ens = mcmoments.Ensemble(np.zeros((4, 2)))
        with pytest.raises(ValueError):
            mcmoments.em_propagate(ens, zero_model(), np.zeros((5, 3, 1)), 0.1)


class TestMomentRhs:
    def test_linear_drift_additive_noise_at_zero_cov(self):
        model = ou_model(rate=2.0, sigma=0.3)
        s = mcmoments.MomentState([1.5], [[0.0]])
        dmean, dcov = mcmoments.moment_rhs(s, model)
        np.testing.assert_allclose(dmean, [-3.0], atol=0)
        np.testing.assert_allclose(dcov, [[0.09]], rtol=1e-15)

    def test_ou_closure(self):
        model = ou_model(rate=1.0, sigma=0.5)
        s = mcmoments.MomentState([0.7], [[0.2]])
        dmean, dcov = mcmoments.moment_rhs(s, model)
        assert dmean[0] == -0.7
        assert abs(dcov[0, 0] - (-2 * 0.2 + 0.25)) < 1e-15

    def test_roberts_closure_formulas(self):
        # hand substitution: with f = a*x - x*y, g = x^2 - y,
        # fx = a - My, fy = -Mx, gx = 2 Mx, gy = -1:
        #   dMx = f(M) - Cxy,          dMy = g(M) + Cxx
        #   dCxx = 2 fx Cxx + 2 fy Cxy
        #   dCxy = fy Cyy + (fx + gy) Cxy + gx Cxx
        #   dCyy = 2 gy Cyy + 2 gx Cxy + sigma^2
        alpha, sigma = 1.3, 0.7
        model = mcmoments.roberts_model(alpha=alpha, sigma=sigma)
        mx, my = 0.8, -0.4
        cxx, cxy, cyy = 0.5, 0.1, 0.9
        s = mcmoments.MomentState([mx, my], [[cxx, cxy], [cxy, cyy]])
        dmean, dcov = mcmoments.moment_rhs(s, model)
        fx, fy, gx, gy = alpha - my, -mx, 2 * mx, -1.0
        np.testing.assert_allclose(dmean, [alpha * mx - mx * my - cxy,
                                           mx * mx - my + cxx], rtol=1e-15)
        np.testing.assert_allclose(dcov[0, 0], 2 * fx * cxx + 2 * fy * cxy, rtol=1e-15)
        np.testing.assert_allclose(dcov[0, 1], fy * cyy + (fx + gy) * cxy + gx * cxx,
                                   rtol=1e-15)
        np.testing.assert_allclose(dcov[1, 1], 2 * gy * cyy + 2 * gx * cxy + sigma ** 2,
                                   rtol=1e-15)
        np.testing.assert_array_equal(dcov, dcov.T)


class TestMomentPropagate:
    def test_zero_model_unchanged(self):
        s = mcmoments.MomentState([1.0, -2.0], [[1.0, 0.2], [0.2, 2.0]])
        out = mcmoments.moment_propagate(s, zero_model(), 1.0, 0.1)
        np.testing.assert_array_equal(out.mean, s.mean)
        np.testing.assert_array_equal(out.cov, s.cov)

    def test_ou_matches_analytic(self):
        model = ou_model(rate=1.0, sigma=0.5)
        s0 = mcmoments.MomentState([1.0], [[0.25]])
        out = mcmoments.moment_propagate(s0, model, 1.0, 1e-3)
        mean, var = ou_moments(1.0, rate=1.0, sigma=0.5, mean0=1.0, var0=0.25)
        assert abs(out.mean[0] - mean) <= 1e-3 * abs(mean)
        assert abs(out.cov[0, 0] - var) <= 1e-3 * abs(var)

    def test_symmetry_preserved_along_history(self):
        model = mcmoments.roberts_model(alpha=1.0, sigma=1.0)
        s0 = mcmoments.MomentState([1.0, 1.0], np.zeros((2, 2)))
        _, _, covs = mcmoments.moment_history(model, s0, 2.0, 0.02)
        for cov in covs:
            np.testing.assert_array_equal(cov, cov.T)

    def test_blowup_raises(self):
        model = mcmoments.SdeModel(
            dim=1, n_w=1,
            drift=lambda X, lam, t: 1e5 * X,
            diffusion=lambda X, lam, t: np.zeros((1, 1)),
            initial_sampler=lambda P, rng: np.ones((P, 1)),
            drift_jac=lambda m, lam, t: np.array([[1e5]]),
        )
        with np.errstate(over="ignore"):
            with pytest.raises(mcmoments.NonFinite):
                mcmoments.moment_propagate(mcmoments.MomentState([1.0], [[0.0]]),
                                           model, 200.0, 1.0)

    def test_step_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mcmoments.moment_propagate(mcmoments.MomentState([0.0], [[0.0]]),
                                       zero_model(1), 1.0, 0.3)


class TestRestrict:
    def test_identical_particles_zero_cov(self):
        ens = mcmoments.Ensemble(np.full((10, 2), 3.0))
        s = mcmoments.restrict(ens)
        np.testing.assert_array_equal(s.mean, [3.0, 3.0])
        np.testing.assert_array_equal(s.cov, np.zeros((2, 2)))

    def test_two_point_population_moments(self):
        ens = mcmoments.Ensemble(np.array([[-1.0], [1.0]]))
        s = mcmoments.restrict(ens)
        assert s.mean[0] == 0.0
        assert s.cov[0, 0] == 1.0  # population (1/P) normalization

    def test_large_ou_ensemble_against_analytic(self):
        sigma, particles = 0.5, 40000
        model = ou_model(rate=1.0, sigma=sigma, mean0=1.0, std0=0.0)
        table = mcmoments.BrownianTable(seed=8, n_slabs=1, steps=50,
                                        particles=particles, n_w=1, inner_dt=0.02)
        ens = mcmoments.em_propagate(mcmoments.Ensemble(np.ones((particles, 1))),
                                     model, table.increments(0), 0.02)
        s = mcmoments.restrict(ens)
        _, var = ou_moments(1.0, rate=1.0, sigma=sigma, mean0=1.0, var0=0.0)
        # 3 standard errors for the variance of a near-Gaussian sample
        assert abs(s.cov[0, 0] - var) < 3 * var * np.sqrt(2.0 / particles) + 0.01 * var


class TestMatch:
    def test_idempotence(self):
        states = RNG.standard_normal((500, 3)) @ RNG.standard_normal((3, 3))
        ens = mcmoments.Ensemble(states)
        out, info = mcmoments.match(mcmoments.restrict(ens), ens)
        assert np.max(np.abs(out.states - ens.states)) <= 1e-10
        assert not info.psd_repaired and info.resampled_dims == ()

    def test_hand_example_1d(self):
        ens = mcmoments.Ensemble(np.array([[-1.0], [1.0]]))
        target = mcmoments.MomentState([3.0], [[4.0]])
        out, _ = mcmoments.match(target, ens)
        np.testing.assert_allclose(out.states, [[1.0], [5.0]], atol=1e-14)
        s = mcmoments.restrict(out)
        assert abs(s.mean[0] - 3.0) < 1e-14 and abs(s.cov[0, 0] - 4.0) < 1e-14

    def test_degenerate_ensemble_resampled(self):
        ens = mcmoments.Ensemble(np.zeros((2000, 1)))
        target = mcmoments.MomentState([2.0], [[9.0]])
        out, info = mcmoments.match(target, ens, rng=np.random.default_rng(1))
        assert info.resampled_dims == (0,)
        s = mcmoments.restrict(out)
        assert abs(s.mean[0] - 2.0) <= 1e-8
        assert abs(s.cov[0, 0] - 9.0) <= 1e-8 * 9.0

    def test_degenerate_without_rng_rejected(self):
        ens = mcmoments.Ensemble(np.zeros((10, 1)))
        with pytest.raises(ValueError):
            mcmoments.match(mcmoments.MomentState([0.0], [[1.0]]), ens)

    def test_non_psd_target_repaired(self):
        states = RNG.standard_normal((2000, 2))
        ens = mcmoments.Ensemble(states)
        target = mcmoments.MomentState([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
        out, info = mcmoments.match(target, ens)
        assert info.psd_repaired
        np.testing.assert_allclose(info.target_used.cov, np.full((2, 2), 1.5),
                                   atol=1e-12)
        got = mcmoments.restrict(out)
        rel = np.linalg.norm(got.cov - info.target_used.cov) / np.linalg.norm(
            info.target_used.cov)
        assert rel <= 1e-8

    def test_non_psd_target_strict_raises(self):
        ens = mcmoments.Ensemble(RNG.standard_normal((100, 2)))
        target = mcmoments.MomentState([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(mcmoments.UnrepairableCovariance):
            mcmoments.match(target, ens, repair="strict")

    def test_singular_target_collapses_coordinates(self):
        ens = mcmoments.Ensemble(RNG.standard_normal((1000, 2)))
        target = mcmoments.MomentState([1.0, -1.0], [[4.0, 0.0], [0.0, 0.0]])
        out, _ = mcmoments.match(target, ens)
        np.testing.assert_allclose(out.states[:, 1], -1.0, atol=1e-12)

    def test_matching_consistency_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            d = int(rng.integers(1, 4))
            states = rng.standard_normal((1000, d)) @ rng.standard_normal((d, d))
            ens = mcmoments.Ensemble(states + rng.standard_normal(d))
            r = rng.standard_normal((d, d))
            target = mcmoments.MomentState(rng.standard_normal(d),
                                           r @ r.T + 0.05 * np.eye(d))
            out, _ = mcmoments.match(target, ens, rng=rng)
            got = mcmoments.restrict(out)
            scale = max(1.0, np.abs(target.mean).max())
            assert np.max(np.abs(got.mean - target.mean)) <= 1e-12 * scale
            rel = np.linalg.norm(got.cov - target.cov) / max(1.0, np.linalg.norm(target.cov))
            assert rel <= 1e-8


class TestCouplingAndLift:
    def make_coupling(self, particles=400, seed=13):
        model = mcmoments.roberts_model(alpha=1.0, sigma=0.5)
        setup = mcmoments.make_parareal_setup(model, particles=particles,
                                              t_final=2.0, n_slabs=2,
                                              inner_dt=0.02, seed=seed)
        return setup

    def test_lift_of_initial_moments_is_initial_ensemble(self):
        states = RNG.standard_normal((1000, 2)) * [1.0, 2.0] + [0.5, -0.5]
        initial = mcmoments.Ensemble(states)
        cpl = mcmoments.MomentsCoupling(seed=3, initial=initial)
        micro, macro_used, events = cpl.lift(mcmoments.restrict(initial), n=0)
        assert np.max(np.abs(micro.states - initial.states)) <= 1e-10
        assert events == ()

    def test_lift_from_dirac_exercises_resampling(self):
        setup = self.make_coupling()
        target = mcmoments.MomentState([1.0, 1.0], np.eye(2) * 0.1)
        micro, _, events = setup.coupling.lift(target, n=1)
        assert len(events) == 1 and events[0].resampled_dims == (0, 1)
        got = mcmoments.restrict(micro)
        np.testing.assert_allclose(got.mean, target.mean, atol=1e-10)
        np.testing.assert_allclose(got.cov, target.cov, atol=1e-9)

    def test_lift_repairs_non_psd_target(self):
        setup = self.make_coupling()
        target = mcmoments.MomentState([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
        micro, macro_used, events = setup.coupling.lift(target, n=1)
        assert events[0].psd_repaired
        np.testing.assert_allclose(macro_used.cov, np.full((2, 2), 1.5), atol=1e-12)
        got = mcmoments.restrict(micro)
        np.testing.assert_allclose(got.cov, macro_used.cov, atol=1e-8)


class TestMacroAlgebra:
    def test_exact_roundtrip(self):
        a = mcmoments.MomentState([1.0, 2.0], [[2.0, 0.5], [0.5, 3.0]])
        b = mcmoments.MomentState([0.5, -1.0], [[1.0, 0.1], [0.1, 1.0]])
        alg = mcmoments.MOMENT_ALGEBRA
        back = alg.add(alg.sub(a, b), b)
        np.testing.assert_array_equal(back.mean, a.mean)
        np.testing.assert_array_equal(back.cov, a.cov)

    def test_pd_plus_pd_minus_zero_stays_pd(self):
        alg = mcmoments.MOMENT_ALGEBRA
        a = mcmoments.MomentState([0.0], [[1.0]])
        zero = mcmoments.MomentState([0.0], [[0.0]])
        out = alg.sub(alg.add(a, a), zero)
        assert out.psd_flag and out.cov[0, 0] == 2.0

    def test_combination_can_leave_psd_cone(self):
        alg = mcmoments.MOMENT_ALGEBRA
        eye = mcmoments.MomentState([0.0, 0.0], np.eye(2))
        big = mcmoments.MomentState([0.0, 0.0], [[3.0, 0.0], [0.0, 0.5]])
        out = alg.sub(alg.add(eye, eye), big)
        np.testing.assert_array_equal(out.cov, [[-1.0, 0.0], [0.0, 1.5]])
        assert not out.psd_flag


class TestRobertsModel:
    def test_drift_zero_at_equilibria(self):
        model = mcmoments.roberts_model(alpha=1.0, sigma=1.0)
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, 1.0]])
        drift = model.drift(pts, None, 0.0)
        np.testing.assert_array_equal(drift, np.zeros((3, 2)))

    def test_no_mean_field_hook(self):
        model = mcmoments.roberts_model()
        assert model.psi is None

    def test_moment_rhs_at_point_mass(self):
        model = mcmoments.roberts_model(alpha=1.0, sigma=1.0)
        s = mcmoments.MomentState([1.0, 1.0], np.zeros((2, 2)))
        dmean, dcov = mcmoments.moment_rhs(s, model)
        np.testing.assert_array_equal(dmean, [0.0, 0.0])
        np.testing.assert_array_equal(dcov, [[0.0, 0.0], [0.0, 1.0]])

    def test_additive_noise_jacobian_absent(self):
        assert mcmoments.roberts_model().diffusion_jac is None


class TestParArealDeterminism:
    def test_same_seed_bitwise_identical(self):
        model = mcmoments.roberts_model(alpha=1.0, sigma=0.5)
        grids = []
        for _ in range(2):
            setup = mcmoments.make_parareal_setup(model, particles=100,
                                                  t_final=2.0, n_slabs=4,
                                                  inner_dt=0.02, seed=99)
            grids.append(engine.run_micro_macro(setup.propagators, setup.coupling,
                                                setup.algebra, setup.u0, 4, 4))
        for k in range(5):
            for n in range(5):
                np.testing.assert_array_equal(grids[0].micro[k][n].states,
                                              grids[1].micro[k][n].states)

    def test_worker_count_does_not_change_results(self):
        model = mcmoments.roberts_model(alpha=1.0, sigma=0.5)
        grids = []
        for workers in (1, 4):
            setup = mcmoments.make_parareal_setup(model, particles=100,
                                                  t_final=2.0, n_slabs=4,
                                                  inner_dt=0.02, seed=7)
            grids.append(engine.run_micro_macro(setup.propagators, setup.coupling,
                                                setup.algebra, setup.u0, 4, 4,
                                                workers=workers))
        for k in range(5):
            for n in range(5):
                np.testing.assert_array_equal(grids[0].micro[k][n].states,
                                              grids[1].micro[k][n].states)

    def test_finite_termination_in_moments(self):
        model = mcmoments.roberts_model(alpha=1.0, sigma=0.5)
        setup = mcmoments.make_parareal_setup(model, particles=300, t_final=3.0,
                                              n_slabs=3, inner_dt=0.02, seed=17)
        grid = engine.run_micro_macro(setup.propagators, setup.coupling,
                                      setup.algebra, setup.u0, 3, 3)
        for n in range(4):
            ref = mcmoments.restrict(grid.reference[n])
            got = mcmoments.restrict(grid.micro[3][n])
            np.testing.assert_allclose(got.mean, ref.mean, atol=1e-12)
            np.testing.assert_allclose(got.cov, ref.cov, atol=1e-12)
