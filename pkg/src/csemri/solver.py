"""Single-voxel recovery and certified local-convergence radii.

Fixed-step gradient descent on the Wirtinger pair (also called Wirtinger
flow) recovers the true parameter from any initial iterate inside a
certified radius around it. The certificates come in three nested flavors,
all built from the same two curvature numbers ``r1 = ||R'(xi0) s0||`` and
``r2 = ||R''(xi0) s0||`` and the perturbation envelope

    gamma(eta) = 2 ||s0||^2 |eta| beta(tau_s Im xi0, tau_s Im eta),
    beta(a, b) = integral_0^1 exp(|a + theta b|) dtheta.

The scalar ``gamma_plus(rho)`` is the positive root of

    u^2 + r2 / (2 tau_ne^(5/2)) u - (1 - rho) r1^2 / (2 tau_ne^3) = 0,

so positive curvature (Hessian between ``rho`` and ``2 + rho`` times its
value at the truth) is guaranteed while ``gamma(eta) <= gamma_plus^2``.
Bounding ``beta`` by ``exp(a) exp(tau_s |eta|)`` yields the closed-form
Lambert-W radius; evaluating ``beta`` exactly in the worst (imaginary)
direction yields the loose radius; re-estimating ``||R(xi0+eta) s0||`` by
a second-order expansion yields the tight radius. Each successive bound
relaxes the previous inequality, so the three radii are always ordered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import exp, expm1, inf, log1p, sqrt

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateCurvature, DomainError, NonBracketed
from .residual import concentrations_ri, wirtinger_gradient_f0, _pieces

__all__ = [
    "FlowConfig",
    "RecoveryResult",
    "CurvatureReport",
    "lambert_w0",
    "beta_integral",
    "gamma_plus",
    "radius_lambert",
    "radius_loose",
    "radius_tight",
    "step_bound",
    "certified_step",
    "curvature_profile",
    "radius_empirical_from_profile",
    "curvature_report",
    "wirtinger_flow",
    "constrained_flow",
    "regularized_constrained_flow",
]


def lambert_w0(x):
    """Main branch of the Lambert W function for real ``x >= -1/e``.

    Halley iteration from the initial guess ``log(1 + x)``; the residual
    ``|w e^w - x|`` is driven below ``1e-14 max(1, |x|)``.
    """
    x = float(x)
    branch_point = -exp(-1.0)
    if x < branch_point - 1e-12:
        raise DomainError(f"lambert_w0 requires x >= -1/e, got {x}")
    x = max(x, branch_point)
    if x == 0.0:
        return 0.0
    w = log1p(x)
    for _ in range(60):
        ew = exp(w)
        f = w * ew - x
        if abs(f) <= 1e-14 * max(1.0, abs(x)):
            break
        denom = ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0)
        w -= f / denom
    return w


def beta_integral(a, b):
    """integral_0^1 exp(|a + theta b|) dtheta, evaluated piecewise exactly."""
    a = float(a)
    b = float(b)
    if b == 0.0:
        return exp(abs(a))
    if a >= 0.0 and a + b >= 0.0:
        return exp(a) * expm1(b) / b
    if a <= 0.0 and a + b <= 0.0:
        return exp(-a) * expm1(-b) / (-b)
    # sign change at theta = -a/b: both segments integrate to positive area
    return (expm1(abs(a)) + expm1(abs(a + b))) / abs(b)


def _curvature_numbers(op, xi0, s0):
    rs, r1s, r2s = _pieces(op, xi0, s0)
    return (
        float(np.linalg.norm(r1s)),
        float(np.linalg.norm(r2s)),
        float(np.linalg.norm(np.asarray(s0))),
    )


def gamma_plus(op, xi0, s0, rho):
    """Positive root of the curvature-margin quadratic (see module docstring)."""
    if not 0.0 < rho < 1.0:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    r1, r2, s_norm = _curvature_numbers(op, xi0, s0)
    if r1 <= 1e-14 * max(s_norm * op.tau_ne, 1e-300):
        raise DegenerateCurvature("||R'(xi0) s0|| vanishes; no curvature to certify")
    tau = op.tau_ne
    b = r2 / (2.0 * tau**2.5)
    c = (1.0 - rho) * r1**2 / (2.0 * tau**3)
    return 2.0 * c / (b + sqrt(b * b + 4.0 * c))


def _radius_rhs(op, xi0, s0, rho):
    """(gamma_plus^2) / (2 ||s0||^2), the envelope budget for gamma(eta)."""
    g = gamma_plus(op, xi0, s0, rho)
    s_norm = float(np.linalg.norm(np.asarray(s0)))
    return g * g / (2.0 * s_norm**2)


def radius_lambert(op, xi0, s0, rho=0.5):
    """Closed-form certified radius via the Lambert W function.

    Uses ``beta(a, b) <= exp(a) exp(tau_s |eta|)``, turning the envelope
    condition into ``tau_s r exp(tau_s r) <= tau_s exp(-tau_s Im xi0) *
    gamma_plus^2 / (2 ||s0||^2)``. Invariant under rescaling of ``s0``.
    """
    if np.imag(xi0) < 0:
        raise DomainError("xi0 must lie in the closed upper half-plane")
    budget = _radius_rhs(op, xi0, s0, rho)
    arg = op.tau_s * exp(-op.tau_s * float(np.imag(xi0))) * budget
    return lambert_w0(arg) / op.tau_s


def radius_loose(op, xi0, s0, rho=0.5, search_cap_hz=None):
    """Certified radius with the envelope beta evaluated exactly.

    Solves ``r * beta(tau_s Im xi0, tau_s r) = gamma_plus^2 / (2||s0||^2)``
    by safeguarded bisection. The direction ``Im eta = |eta|`` is the worst
    case over the half-plane because beta increases in its second argument,
    so the radius is valid for every direction.
    """
    if np.imag(xi0) < 0:
        raise DomainError("xi0 must lie in the closed upper half-plane")
    budget = _radius_rhs(op, xi0, s0, rho)
    a = op.tau_s * float(np.imag(xi0))

    def g(r):
        return budget - r * beta_integral(a, op.tau_s * r)

    hi = _bracket_sign_change(g, op.tau_s, search_cap_hz)
    return float(brentq(g, 0.0, hi, xtol=1e-14, rtol=1e-15))


def _circle_eval(op, xi0, s0, r, angular_samples, fn):
    """Minimize fn(Rs, R's, R''s) over the circle |xi - xi0| = r in H+.

    ``fn`` maps the three batched matrix-vector products to one value per
    angle; an angular grid is refined by golden sections around the best
    arc. Returns the refined minimum.
    """
    im0 = float(np.imag(xi0))
    if im0 >= r:
        lo, hi, closed = 0.0, 2.0 * np.pi, True
    else:
        # sin(theta) >= -im0/r keeps xi inside the closed half-plane
        t0 = float(np.arcsin(-im0 / r))
        lo, hi, closed = t0, np.pi - t0, False

    def values(thetas):
        xi = complex(xi0) + r * np.exp(1j * np.asarray(thetas))
        arg = 2j * np.pi * xi[:, None] * op.times[None, :]
        wp = np.exp(arg)
        u = np.exp(-arg) * np.asarray(s0)[None, :]
        rs = wp * (u @ op.p_r.T)
        r1s = wp * (u @ op.p_r1.T)
        r2s = wp * (u @ op.p_r2.T)
        return fn(rs, r1s, r2s)

    thetas = np.linspace(lo, hi, angular_samples, endpoint=not closed)
    vals = values(thetas)
    k = int(np.argmin(vals))
    span = (hi - lo) / max(angular_samples - 1, 1)
    a = max(lo, thetas[k] - span)
    b = min(hi, thetas[k] + span)
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = float(values([c])[0]), float(values([d])[0])
    for _ in range(40):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = float(values([c])[0])
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = float(values([d])[0])
    return min(float(np.min(vals)), fc, fd)


def _minorant_fn(rs, r1s, r2s):
    # Cauchy-Schwarz minorant of the Hessian's smallest eigenvalue
    return (
        np.sum(np.abs(r1s) ** 2, axis=1)
        - np.sqrt(np.sum(np.abs(rs) ** 2, axis=1) * np.sum(np.abs(r2s) ** 2, axis=1))
    )


def _min_eig_fn(rs, r1s, r2s):
    # exact smallest eigenvalue of the Hessian quadratic form over phases
    return np.sum(np.abs(r1s) ** 2, axis=1) - np.abs(np.sum(np.conj(rs) * r2s, axis=1))


def radius_tight(op, xi0, s0, rho=0.5, angular_samples=48, growth=1.12, cap_hz=None):
    """Radius over which the monotonicity minorant keeps its margin.

    Numerically solves the implicit inequality

        min_{|xi - xi0| = r, xi in H+} ||R'(xi) s0||^2
            - ||R(xi) s0|| ||R''(xi) s0||  >=  rho ||R'(xi0) s0||^2

    for the largest radius, growing ``r`` geometrically from the loose
    radius (inside which the inequality is certified analytically) until
    the margin first fails, then bisecting. Much sharper than the
    envelope-based radii because the residual norms are evaluated rather
    than bounded.
    """
    r1, _, _ = _curvature_numbers(op, xi0, s0)
    if r1 == 0.0:
        raise DegenerateCurvature("||R'(xi0) s0|| vanishes; no curvature to certify")
    target = rho * r1**2
    if cap_hz is None:
        cap_hz = 600.0 / op.tau_s

    def margin(r):
        return _circle_eval(op, xi0, s0, r, angular_samples, _minorant_fn) - target

    lo = radius_loose(op, xi0, s0, rho)
    if margin(lo) < 0.0:  # guard against discretization slack at the seed
        return lo
    hi = lo
    while True:
        hi = min(hi * growth, cap_hz)
        if margin(hi) < 0.0:
            break
        if hi >= cap_hz:
            raise NonBracketed(f"minorant margin holds beyond the cap {cap_hz:.3e} Hz")
        lo = hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if margin(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return lo


def _bracket_sign_change(fn, tau_s, cap=None):
    """Grow an upper bracket until fn < 0; fn(0) > 0 by construction."""
    if cap is None:
        cap = 600.0 / tau_s  # beta overflows past exp(700)
    hi = min(1.0, cap)
    while fn(hi) > 0.0:
        if hi >= cap:
            raise NonBracketed(f"no sign change up to the search cap {cap:.3e} Hz")
        hi = min(2.0 * hi, cap)
    return hi


def step_bound(rho):
    """Normalized fixed-step limit rho / (2 + rho) for certified descent."""
    if not 0.0 < rho <= 1.0:
        raise DomainError(f"rho must lie in (0, 1], got {rho}")
    return rho / (2.0 + rho)


def certified_step(op, xi_ref, s_ref, rho):
    """Absolute step: 0.9 * step_bound(rho) / L with L = (2+rho) ||R'(xi) s||^2.

    The certified bound is stated in units where the curvature scale
    ``||R'(xi0) s0||^2`` multiplies the objective; the Lipschitz estimate
    converts it into an absolute step.
    """
    r1, _, _ = _curvature_numbers(op, xi_ref, s_ref)
    if r1 == 0.0:
        raise DegenerateCurvature("cannot scale the certified step: zero curvature")
    return 0.9 * step_bound(rho) / ((2.0 + rho) * r1**2)


@dataclass(frozen=True)
class FlowConfig:
    """Fixed-step flow configuration.

    ``step`` is the absolute step size; leave it None and set
    ``certified=True`` to derive it from the curvature at the initial
    iterate. ``grad_tol`` defaults to ``1e-12 ||s0||^2`` (the gradient
    scales with the squared signal).
    """

    step: float | None = None
    max_iters: int = 100_000
    grad_tol: float | None = None
    rho: float = 0.5
    certified: bool = False
    keep_trajectory: bool = False
    clamp_upper_half_plane: bool = True

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise DomainError(f"rho must lie in (0, 1), got {self.rho}")
        if self.step is not None and self.step <= 0.0:
            raise DomainError(f"step must be positive, got {self.step}")
        if self.step is None and not self.certified:
            raise DomainError("either give an absolute step or request certified mode")


@dataclass(frozen=True)
class RecoveryResult:
    xi_hat: complex
    c_hat: np.ndarray
    iterations: int
    final_grad_norm: float
    converged: bool
    trajectory: tuple[complex, ...] | None = None
    s_hat: np.ndarray | None = None
    branch: str | None = None


def _resolve_tols(cfg, s_norm):
    grad_tol = cfg.grad_tol if cfg.grad_tol is not None else 1e-12 * s_norm**2
    return grad_tol


def wirtinger_flow(op, s0, xi_init, cfg):
    """Fixed-step descent xi <- xi - alpha * 2 conj(d_xi f0); projects onto
    the closed upper half-plane after each step."""
    s0 = np.asarray(s0, dtype=complex)
    grad_tol = _resolve_tols(cfg, float(np.linalg.norm(s0)))
    alpha = cfg.step if not cfg.certified else certified_step(op, xi_init, s0, cfg.rho)
    xi = complex(xi_init)
    trajectory = [xi] if cfg.keep_trajectory else None
    converged = False
    grad_norm = inf
    iterations = 0
    for iterations in range(cfg.max_iters + 1):
        grad = 2.0 * np.conj(wirtinger_gradient_f0(op, xi, s0).d_xi)
        grad_norm = abs(grad)
        if grad_norm <= grad_tol:
            converged = True
            break
        if iterations == cfg.max_iters:
            break
        xi = xi - alpha * grad
        if cfg.clamp_upper_half_plane and xi.imag < 0.0:
            xi = complex(xi.real, 0.0)
        if trajectory is not None:
            trajectory.append(xi)
    return RecoveryResult(
        xi_hat=xi,
        c_hat=concentrations_ri(op, xi, s0),
        iterations=iterations,
        final_grad_norm=grad_norm,
        converged=converged,
        trajectory=tuple(trajectory) if trajectory is not None else None,
    )


def _signal_step_size(op, xi, epsilon):
    # ||R(xi)||_op <= exp(tau_s |Im xi| / 2); curvature of the s-block is
    # ||R||^2 plus the regularizer
    lip = exp(op.tau_s * abs(float(np.imag(xi)))) + 2.0 * epsilon
    return 0.9 / lip


def _project_ball(s, center, radius):
    d = s - center
    nrm = float(np.linalg.norm(d))
    if nrm <= radius:
        return s
    if radius == 0.0:
        return center.copy()
    return center + d * (radius / nrm)


def constrained_flow(op, y, delta, xi_init, cfg, epsilon=0.0, alternating=False):
    """Projected joint descent of f(xi, s) (+ epsilon ||s||^2) over the ball
    ||y - s|| <= delta.

    Simultaneous gradient steps in both Wirtinger blocks followed by the
    closed-form radial projection of ``s``; set ``alternating=True`` to
    refresh the xi gradient after the s update instead.
    """
    if delta < 0:
        raise DomainError(f"delta must be nonnegative, got {delta}")
    y = np.asarray(y, dtype=complex)
    scale = max(float(np.linalg.norm(y)), float(delta), 1e-300)
    grad_tol = _resolve_tols(cfg, max(float(np.linalg.norm(y)), 1e-300))
    alpha = cfg.step if not cfg.certified else certified_step(op, xi_init, y, cfg.rho)
    xi = complex(xi_init)
    s = y.copy()
    trajectory = [xi] if cfg.keep_trajectory else None
    converged = False
    grad_norm = inf
    iterations = 0
    for iterations in range(cfg.max_iters + 1):
        ev_grad = 2.0 * np.conj(wirtinger_gradient_f0(op, xi, s).d_xi)
        grad_norm = abs(ev_grad)

        rs_pieces = _pieces(op, xi, s)
        s_grad = _signal_block_gradient(op, xi, rs_pieces[0]) + 2.0 * epsilon * s
        s_new = _project_ball(s - _signal_step_size(op, xi, epsilon) * s_grad, y, delta)
        s_move = float(np.linalg.norm(s_new - s))

        if grad_norm <= grad_tol and s_move <= 1e-12 * scale:
            converged = True
            break
        if iterations == cfg.max_iters:
            break
        if alternating:
            s = s_new
            ev_grad = 2.0 * np.conj(wirtinger_gradient_f0(op, xi, s).d_xi)
            xi = xi - alpha * ev_grad
        else:
            xi = xi - alpha * ev_grad
            s = s_new
        if cfg.clamp_upper_half_plane and xi.imag < 0.0:
            xi = complex(xi.real, 0.0)
        if trajectory is not None:
            trajectory.append(xi)

    s_norm = float(np.linalg.norm(s))
    boundary_gap = abs(float(np.linalg.norm(y - s)) - delta)
    return RecoveryResult(
        xi_hat=xi,
        c_hat=concentrations_ri(op, xi, s),
        iterations=iterations,
        final_grad_norm=grad_norm,
        converged=converged,
        trajectory=tuple(trajectory) if trajectory is not None else None,
        s_hat=s,
        branch="zero" if s_norm <= boundary_gap else "boundary",
    )


def _signal_block_gradient(op, xi, rs):
    # real-chart s gradient 2 d_{s*} f = R(xi)^H R(xi) s, with R^H = R(xi*)
    arg = 2j * np.pi * complex(xi) * op.times
    wp, wm = np.exp(arg), np.exp(-arg)
    return np.conj(wm) * (op.p_r @ (np.conj(wp) * rs))


def regularized_constrained_flow(op, y, delta, epsilon, xi_init, cfg, alternating=False):
    """Constrained flow with the ridge term epsilon ||s||^2.

    At a converged point either the estimated signal vanishes or the ball
    constraint is active; the result records which of the two branches
    happened.
    """
    if epsilon < 0:
        raise DomainError(f"epsilon must be nonnegative, got {epsilon}")
    return constrained_flow(op, y, delta, xi_init, cfg, epsilon=epsilon, alternating=alternating)


def curvature_profile(op, xi0, s0, radii, angular_samples=64):
    """Worst-case curvature quotient Q(r) over circles |xi - xi0| = r.

    Q is the smallest eigenvalue of the Wirtinger Hessian quadratic form,

        (||R'(xi) s0||^2 - |<s0, R(xi*) R''(xi) s0>|) / ||R'(xi0) s0||^2,

    minimized over the circle intersected with the upper half-plane (an
    angular grid refined by golden sections around the best arc). Q(0) is
    one by construction and recovery degrades as Q falls toward zero.
    """
    s0 = np.asarray(s0, dtype=complex)
    _, r1s0, _ = _pieces(op, xi0, s0)
    curv0 = float(np.vdot(r1s0, r1s0).real)
    if curv0 == 0.0:
        raise DegenerateCurvature("zero curvature at the reference parameter")
    return [
        (float(r), _circle_eval(op, xi0, s0, float(r), angular_samples, _min_eig_fn) / curv0)
        for r in radii
    ]


def radius_empirical_from_profile(q_profile):
    """Smallest radius with Q <= 0, linearly interpolated; inf if none."""
    prev_r, prev_q = None, None
    for r, q in q_profile:
        if q <= 0.0:
            if prev_r is None or prev_q is None or prev_q <= 0.0:
                return float(r)
            return float(prev_r + (r - prev_r) * prev_q / (prev_q - q))
        prev_r, prev_q = r, q
    return inf


@dataclass(frozen=True)
class CurvatureReport:
    """Nested convergence radii and the raw curvature profile.

    The radii satisfy lambert <= loose <= tight <= empirical; the figure
    of merit ``||R'(xi0) s0|| / ||R''(xi0) s0||`` sets their overall scale.
    """

    radius_lambert_hz: float
    radius_loose_hz: float
    radius_tight_hz: float
    radius_empirical_hz: float
    figure_of_merit: float
    q_profile: tuple[tuple[float, float], ...] = field(repr=False)


def curvature_report(op, xi0, s0, rho=0.5, radii=None, angular_samples=32):
    r_lam = radius_lambert(op, xi0, s0, rho)
    r_loose = radius_loose(op, xi0, s0, rho)
    r_tight = radius_tight(op, xi0, s0, rho)
    if radii is None:
        radii = np.geomspace(max(r_lam / 4.0, 1e-6), 40.0 * r_tight, 36)
    prof = curvature_profile(op, xi0, s0, radii, angular_samples=angular_samples)
    r1, r2, _ = _curvature_numbers(op, xi0, s0)
    return CurvatureReport(
        radius_lambert_hz=r_lam,
        radius_loose_hz=r_loose,
        radius_tight_hz=r_tight,
        radius_empirical_hz=radius_empirical_from_profile(prof),
        figure_of_merit=r1 / r2 if r2 > 0 else inf,
        q_profile=tuple(prof),
    )
