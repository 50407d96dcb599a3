"""Lambert W, beta envelope, certified radii, and the recovery flows."""

import numpy as np
import pytest
from scipy.integrate import quad

from csemri.errors import DegenerateCurvature, DomainError
from csemri.lattice import fieldmap_lattice, rationalize_echoes
from csemri.residual import make_residual_operator, residual_value, _pieces
from csemri.solver import (
    FlowConfig,
    beta_integral,
    certified_step,
    constrained_flow,
    curvature_profile,
    curvature_report,
    gamma_plus,
    lambert_w0,
    radius_empirical_from_profile,
    radius_lambert,
    radius_loose,
    radius_tight,
    regularized_constrained_flow,
    step_bound,
    wirtinger_flow,
)
from csemri.species import EchoSpec, build_model, load_species, signal

RNG = np.random.default_rng(424242)

HZ_PER_PPM = 3.0 * 42.57747892
WATER = load_species("water")
FAT6 = load_species("fat6", hz_per_ppm=HZ_PER_PPM)
MODEL = build_model([WATER, FAT6], EchoSpec.uniform_ms(1.238, 0.986, 6))
OP = make_residual_operator(MODEL)


def random_complex(shape, rng=RNG):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_voxel(rng=RNG, re=100.0, im=(1.0, 50.0)):
    xi0 = complex(rng.uniform(-re, re), rng.uniform(*im))
    c0 = random_complex(2, rng)
    return xi0, c0, signal(xi0, c0, MODEL)


class TestLambertW:
    def test_fixed_points(self):
        assert lambert_w0(0.0) == 0.0
        assert lambert_w0(np.e) == pytest.approx(1.0, abs=1e-14)

    def test_residual_small(self):
        # bisection oracle
        for x in (2.5, 0.1, 17.0, -0.2, -1 / np.e + 1e-6):
            w = lambert_w0(x)
            assert abs(w * np.exp(w) - x) <= 1e-12 * max(1.0, abs(x))
            lo, hi = -1.0, max(1.0, x)
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if mid * np.exp(mid) < x:
                    lo = mid
                else:
                    hi = mid
            assert w == pytest.approx(0.5 * (lo + hi), abs=1e-10)
            assert w >= -1.0

    def test_domain_error(self):
        with pytest.raises(DomainError):
            lambert_w0(-1.0)


class TestBetaIntegral:
    def test_trivial_values(self):
        assert beta_integral(0.0, 0.0) == 1.0
        assert beta_integral(1.0, 0.0) == pytest.approx(np.e)

    @pytest.mark.parametrize(
        "a,b",
        [(-1.0, 2.0), (2.0, -5.0), (-3.0, -1.0), (0.5, 0.3), (-0.2, 0.1), (4.0, 1e-9)],
    )
    def test_against_quadrature(self, a, b):
        oracle = quad(lambda th: np.exp(abs(a + th * b)), 0.0, 1.0, epsabs=1e-13)[0]
        assert beta_integral(a, b) == pytest.approx(oracle, abs=1e-10)


class TestGammaPlus:
    def test_vanishes_as_rho_tends_to_one(self):
        xi0, _, s0 = random_voxel()
        vals = [gamma_plus(OP, xi0, s0, rho) for rho in (0.5, 0.9, 0.99, 0.999)]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-1 * vals[0]

    def test_monotone_decreasing_in_rho(self):
        xi0, _, s0 = random_voxel()
        rhos = np.linspace(0.05, 0.95, 10)
        vals = [gamma_plus(OP, xi0, s0, r) for r in rhos]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_matches_polynomial_root_oracle(self):
        for _ in range(10):
            xi0, _, s0 = random_voxel()
            rho = RNG.uniform(0.1, 0.9)
            g = gamma_plus(OP, xi0, s0, rho)
            _, r1s, r2s = _pieces(OP, xi0, s0)
            r1, r2 = np.linalg.norm(r1s), np.linalg.norm(r2s)
            tau = OP.tau_ne
            roots = np.roots([1.0, r2 / (2 * tau**2.5), -(1 - rho) * r1**2 / (2 * tau**3)])
            oracle = roots[roots > 0]
            assert len(oracle) == 1
            assert g == pytest.approx(float(oracle[0]), rel=1e-12)

    def test_degenerate_curvature(self):
        with pytest.raises(DegenerateCurvature):
            gamma_plus(OP, 5.0 + 1j, np.zeros(6), 0.5)


class TestRadii:
    def test_signal_rescaling_leaves_radii_unchanged(self):
        xi0, _, s0 = random_voxel()
        for fn in (radius_lambert, radius_loose, radius_tight):
            assert fn(OP, xi0, s0, 0.5) == pytest.approx(fn(OP, xi0, 2.0 * s0, 0.5), rel=1e-9)

    def test_lambert_radius_shrinks_as_rho_tends_to_one(self):
        xi0, _, s0 = random_voxel()
        r9 = radius_lambert(OP, xi0, s0, 0.999)
        r5 = radius_lambert(OP, xi0, s0, 0.5)
        assert r9 < 1e-2 * r5

    def test_ordering_on_random_instances(self):
        for _ in range(100):
            xi0, _, s0 = random_voxel()
            rho = RNG.uniform(0.2, 0.8)
            rl = radius_lambert(OP, xi0, s0, rho)
            ro = radius_loose(OP, xi0, s0, rho)
            rt = radius_tight(OP, xi0, s0, rho, angular_samples=24)
            assert 0.0 < rl <= ro <= rt

    def test_loose_solves_its_equation(self):
        # re-evaluation oracle: the returned radius satisfies the implicit
        # equality to tight tolerance
        xi0, _, s0 = random_voxel()
        rho = 0.5
        r = radius_loose(OP, xi0, s0, rho)
        g = gamma_plus(OP, xi0, s0, rho)
        budget = g * g / (2.0 * np.linalg.norm(s0) ** 2)
        lhs = r * beta_integral(OP.tau_s * xi0.imag, OP.tau_s * r)
        assert abs(lhs - budget) < 1e-10 * budget

    def test_tight_satisfies_its_implicit_equality(self):
        # re-evaluation oracle: at the returned radius the circle-min margin
        # sits on the rho-threshold within the bisection bracket
        from csemri.solver import _circle_eval, _minorant_fn

        xi0, _, s0 = random_voxel()
        rho = 0.5
        rt = radius_tight(OP, xi0, s0, rho, angular_samples=24)
        _, r1s, _ = _pieces(OP, xi0, s0)
        target = rho * np.linalg.norm(r1s) ** 2
        margin = _circle_eval(OP, xi0, s0, rt, 24, _minorant_fn) - target
        assert 0.0 <= margin < 1e-10 * target

    def test_tight_vs_lambert_gap_is_large(self):
        # the closed-form bound is known to underestimate severely; the
        # numerically solved monotonicity radius sits orders above it
        xi0, _, s0 = random_voxel()
        rl = radius_lambert(OP, xi0, s0, 0.5)
        rt = radius_tight(OP, xi0, s0, 0.5, angular_samples=24)
        assert rt > 10.0 * rl

    def test_rejects_lower_half_plane(self):
        _, _, s0 = random_voxel()
        with pytest.raises(DomainError):
            radius_lambert(OP, 10.0 - 5.0j, s0, 0.5)


class TestCurvatureProfile:
    def test_q_at_tiny_radius_is_one(self):
        xi0, _, s0 = random_voxel()
        prof = curvature_profile(OP, xi0, s0, [1e-6], angular_samples=16)
        assert prof[0][1] == pytest.approx(1.0, abs=1e-4)

    def test_q_decays_and_crosses_zero(self):
        xi0, _, s0 = random_voxel(im=(5.0, 30.0))
        radii = np.geomspace(1.0, 200.0, 20)
        prof = curvature_profile(OP, xi0, s0, radii, angular_samples=24)
        crossing = radius_empirical_from_profile(prof)
        assert np.isfinite(crossing)
        assert 5.0 < crossing < 200.0

    def test_profile_continuity(self):
        # grid refinement oracle: adjacent radii give nearby Q values
        xi0, _, s0 = random_voxel()
        radii = np.linspace(5.0, 50.0, 19)
        prof = curvature_profile(OP, xi0, s0, radii, angular_samples=24)
        qs = np.array([q for _, q in prof])
        assert np.max(np.abs(np.diff(qs))) < 0.35

    def test_report_ordering_invariant(self):
        for _ in range(5):
            xi0, _, s0 = random_voxel()
            rep = curvature_report(OP, xi0, s0, rho=0.5, angular_samples=16)
            assert (
                rep.radius_lambert_hz
                <= rep.radius_loose_hz
                <= rep.radius_tight_hz
                <= rep.radius_empirical_hz
            )
            assert rep.figure_of_merit > 0


class TestStepBound:
    def test_values(self):
        assert step_bound(1.0) == pytest.approx(1.0 / 3.0)
        assert step_bound(0.5) == pytest.approx(0.2)

    def test_monotone(self):
        rhos = np.linspace(0.01, 0.99, 20)
        vals = [step_bound(r) for r in rhos]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_domain(self):
        with pytest.raises(DomainError):
            step_bound(0.0)
        with pytest.raises(DomainError):
            step_bound(1.5)


class TestWirtingerFlow:
    def test_converges_instantly_at_truth(self):
        xi0, c0, s0 = random_voxel()
        res = wirtinger_flow(OP, s0, xi0, FlowConfig(certified=True))
        assert res.converged
        assert res.iterations == 0
        assert np.allclose(res.c_hat, c0, rtol=1e-8)

    def test_certified_convergence_from_lambert_disk(self):
        fails = 0
        for _ in range(50):
            xi0, c0, s0 = random_voxel()
            rl = radius_lambert(OP, xi0, s0, 0.5)
            ang = RNG.uniform(0, 2 * np.pi)
            xi_init = xi0 + rl * np.sqrt(RNG.uniform(0, 1)) * np.exp(1j * ang)
            if xi_init.imag < 0:
                xi_init = complex(xi_init.real, 0.0)
            _, r1s, _ = _pieces(OP, xi_init, s0)
            gtol = 0.1e-8 * np.linalg.norm(r1s) ** 2
            res = wirtinger_flow(OP, s0, xi_init, FlowConfig(certified=True, grad_tol=gtol))
            if not (res.converged and abs(res.xi_hat - xi0) < 1e-8):
                fails += 1
        assert fails == 0

    def test_distance_contracts_monotonically(self):
        xi0, c0, s0 = random_voxel()
        rl = radius_lambert(OP, xi0, s0, 0.5)
        xi_init = xi0 + 0.95 * rl
        res = wirtinger_flow(
            OP, s0, xi_init, FlowConfig(certified=True, keep_trajectory=True, max_iters=2000)
        )
        dist = np.abs(np.array(res.trajectory) - xi0)
        moving = dist > 1e-11
        assert np.all(np.diff(dist)[moving[:-1]] < 0)

    def test_lattice_shifted_init_lands_on_shifted_solution(self):
        period = fieldmap_lattice(rationalize_echoes(MODEL.echoes)).period_hz
        xi0, c0, s0 = random_voxel()
        rl = radius_lambert(OP, xi0, s0, 0.5)
        res = wirtinger_flow(
            OP, s0, xi0 + period + 0.5 * rl, FlowConfig(certified=True, max_iters=5000)
        )
        assert abs(res.xi_hat - (xi0 + period)) < 1e-6
        assert np.allclose(res.c_hat, c0, rtol=1e-6)

    def test_lattice_equivariance_of_iterates(self):
        period = fieldmap_lattice(rationalize_echoes(MODEL.echoes)).period_hz
        xi0, c0, s0 = random_voxel()
        cfg = FlowConfig(step=2000.0, max_iters=400, keep_trajectory=True, grad_tol=1e-300)
        ra = wirtinger_flow(OP, s0, xi0 + 3.0, cfg)
        rb = wirtinger_flow(OP, s0, xi0 + 3.0 + period, cfg)
        diffs = np.array(rb.trajectory) - np.array(ra.trajectory)
        assert np.max(np.abs(diffs - period)) < 1e-8
        assert np.linalg.norm(ra.c_hat - rb.c_hat) < 1e-10 * np.linalg.norm(ra.c_hat)

    def test_non_convergence_is_reported_not_raised(self):
        xi0, c0, s0 = random_voxel()
        res = wirtinger_flow(OP, s0, xi0 + 1.0, FlowConfig(step=1e-9, max_iters=5))
        assert not res.converged
        assert res.iterations == 5

    def test_config_validation(self):
        with pytest.raises(DomainError):
            FlowConfig()  # neither absolute step nor certified mode
        with pytest.raises(DomainError):
            FlowConfig(step=-1.0)
        with pytest.raises(DomainError):
            FlowConfig(step=1.0, rho=1.5)


class TestConstrainedFlow:
    def test_delta_zero_reduces_to_plain_flow(self):
        xi0, c0, s0 = random_voxel()
        cfg = FlowConfig(certified=True, max_iters=3000)
        plain = wirtinger_flow(OP, s0, xi0 + 0.001, cfg)
        pinned = constrained_flow(OP, s0, 0.0, xi0 + 0.001, cfg)
        assert pinned.xi_hat == plain.xi_hat
        assert np.allclose(pinned.s_hat, s0)

    def test_noiseless_feasible_reaches_zero_objective(self):
        xi0, c0, s0 = random_voxel()
        cfg = FlowConfig(certified=True, max_iters=5000)
        res = constrained_flow(OP, s0, 0.05 * np.linalg.norm(s0), xi0 + 0.001, cfg)
        assert residual_value(OP, res.xi_hat, res.s_hat) < 1e-18 * np.linalg.norm(s0) ** 2
        assert abs(res.xi_hat - xi0) < 0.01

    def test_noisy_recovery_within_oracle_band(self):
        # Monte-Carlo oracle: the fieldmap-aware least-squares error over
        # noise draws bounds what the constrained solver should achieve
        rng = np.random.default_rng(7)
        xi0 = complex(15.0, 20.0)
        c0 = np.array([0.7, 0.3 + 0j])
        s0 = signal(xi0, c0, MODEL)
        sigma = 0.01 * np.max(np.abs(s0))
        from csemri.residual import concentrations_ri

        solver_errs = []
        oracle_errs = []
        for _ in range(30):
            z = (rng.standard_normal(6) + 1j * rng.standard_normal(6)) / np.sqrt(2)
            y = s0 + sigma * z
            res = constrained_flow(
                OP, y, sigma * np.sqrt(6), xi0, FlowConfig(certified=True, max_iters=4000)
            )
            solver_errs.append(np.linalg.norm(res.c_hat - c0))
            oracle_errs.append(np.linalg.norm(concentrations_ri(OP, xi0, y) - c0))
        assert np.mean(solver_errs) <= 3.0 * np.mean(oracle_errs)


class TestRegularizedFlow:
    def test_epsilon_zero_matches_constrained(self):
        xi0, c0, s0 = random_voxel()
        cfg = FlowConfig(certified=True, max_iters=2000)
        a = constrained_flow(OP, s0, 0.02, xi0 + 0.001, cfg)
        b = regularized_constrained_flow(OP, s0, 0.02, 0.0, xi0 + 0.001, cfg)
        assert a.xi_hat == b.xi_hat
        assert np.array_equal(a.s_hat, b.s_hat)

    def test_pure_noise_takes_zero_branch(self):
        rng = np.random.default_rng(3)
        y = (rng.standard_normal(6) + 1j * rng.standard_normal(6)) / np.sqrt(2)
        res = regularized_constrained_flow(
            OP,
            y,
            1.5 * np.linalg.norm(y),
            1e-2,
            1.0 + 0j,
            FlowConfig(step=1e3, max_iters=50_000),
        )
        assert res.branch == "zero"
        assert np.linalg.norm(res.s_hat) < 1e-6 * np.linalg.norm(y)

    def test_noiseless_feasible_takes_boundary_branch(self):
        xi0, c0, s0 = random_voxel()
        delta = 0.05 * np.linalg.norm(s0)
        res = regularized_constrained_flow(
            OP, s0, delta, 1e-4, xi0, FlowConfig(certified=True, max_iters=20_000)
        )
        assert res.branch == "boundary"
        assert abs(np.linalg.norm(s0 - res.s_hat) - delta) < 1e-6 * np.linalg.norm(s0)

    def test_dichotomy_on_noisy_voxels(self):
        rng = np.random.default_rng(42)
        violations = 0
        for _ in range(25):
            xi0 = complex(rng.uniform(-50, 50), rng.uniform(2, 40))
            c0 = rng.standard_normal(2) + 1j * rng.standard_normal(2)
            s0 = signal(xi0, c0, MODEL)
            sigma = 0.01 * np.max(np.abs(s0))
            y = s0 + sigma * (rng.standard_normal(6) + 1j * rng.standard_normal(6)) / np.sqrt(2)
            delta = sigma * np.sqrt(6)
            res = regularized_constrained_flow(
                OP, y, delta, 1e-3, xi0 + 0.001, FlowConfig(certified=True, max_iters=20_000)
            )
            gap = min(np.linalg.norm(res.s_hat), abs(np.linalg.norm(y - res.s_hat) - delta))
            if gap >= 1e-6 * max(np.linalg.norm(y), delta):
                violations += 1
        assert violations == 0


class TestCertifiedStep:
    def test_below_normalized_bound(self):
        xi0, _, s0 = random_voxel()
        alpha = certified_step(OP, xi0, s0, 0.5)
        _, r1s, _ = _pieces(OP, xi0, s0)
        lip = (2 + 0.5) * np.linalg.norm(r1s) ** 2
        assert alpha * lip < step_bound(0.5)
