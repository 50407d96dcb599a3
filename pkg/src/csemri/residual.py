"""Oblique-projection residual and its Wirtinger derivatives.

With ``P_R = I - Phi Phi^+`` the orthogonal projector onto
``range(Phi)^perp``, the residual matrix

    R(xi) = W(xi) P_R W(-xi)

is an oblique projector whose kernel contains every signal the model can
explain at parameter ``xi``. The voxel objective is
``f0(xi) = 0.5 * ||R(xi) s0||^2``; its derivatives in the Wirtinger pair
``(xi, xi*)`` follow from the commutator recursion

    R^(n)(xi) = 2 pi i (T R^(n-1)(xi) - R^(n-1)(xi) T)

which because ``T`` is diagonal acts entrywise as multiplication by
``2 pi i (t_k - t_j)``. Conventions used throughout:

* inner products are antilinear in the first argument (``np.vdot``);
* for a real-valued objective the real-chart gradient at ``xi`` is the
  complex number ``2 * conj(d_xi)``, i.e. ``(df/dRe, df/dIm) =
  (2 Re d_xi, -2 Im d_xi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, OverflowRisk, RankDeficient

__all__ = [
    "ResidualOperator",
    "WirtingerGradient",
    "WirtingerHessian",
    "FullResidualEval",
    "make_residual_operator",
    "residual_matrix",
    "residual_derivative",
    "residual_value",
    "wirtinger_gradient_f0",
    "wirtinger_hessian_f0",
    "hessian_quadratic_form",
    "concentrations_ri",
    "concentrations_mp",
    "full_residual",
]

EXP_GUARD = 700.0 / (2.0 * np.pi)


@dataclass(frozen=True)
class ResidualOperator:
    """Precomputed projector, pseudoinverse and commutator kernels.

    ``tau_s = 4 pi (t_ne - t_1)`` and ``tau_ne = 4 pi t_ne`` are the two
    time scales entering every curvature and radius bound.
    """

    model: object
    p_r: np.ndarray = field(repr=False)
    phi_pinv: np.ndarray = field(repr=False)
    tau_s: float
    tau_ne: float
    # (2 pi i (t_k - t_j))^n * P_R for n = 1, 2: derivative kernels
    p_r1: np.ndarray = field(repr=False)
    p_r2: np.ndarray = field(repr=False)

    @property
    def times(self):
        return self.model.times

    @property
    def n_e(self):
        return self.model.n_e

    @property
    def n_s(self):
        return self.model.n_s


def make_residual_operator(model, rank_tol=1e-10):
    """Build the residual machinery for a full-rank model matrix."""
    u, svals, vh = np.linalg.svd(model.phi, full_matrices=False)
    if svals[-1] <= rank_tol * svals[0]:
        raise RankDeficient(
            f"model matrix numerically rank-deficient: sigma_min/sigma_max = "
            f"{svals[-1] / svals[0]:.3e}"
        )
    phi_pinv = (vh.conj().T / svals) @ u.conj().T
    p_r = np.eye(model.n_e) - model.phi @ phi_pinv
    p_r = 0.5 * (p_r + p_r.conj().T)  # symmetrize away rounding noise
    t = model.times
    dt = t[:, None] - t[None, :]
    kernel = 2j * np.pi * dt
    return ResidualOperator(
        model=model,
        p_r=p_r,
        phi_pinv=phi_pinv,
        tau_s=float(4 * np.pi * (t[-1] - t[0])),
        tau_ne=float(4 * np.pi * t[-1]),
        p_r1=kernel * p_r,
        p_r2=kernel * kernel * p_r,
    )


def _check_guard(op, xi):
    if abs(np.imag(xi)) * op.times[-1] > EXP_GUARD:
        raise OverflowRisk(
            f"|Im xi| = {abs(np.imag(xi)):.3e} Hz would overflow exp at "
            f"t = {op.times[-1]:.3e} s"
        )


def _weights(op, xi):
    """(W(xi) diag, W(-xi) diag) for one parameter value."""
    arg = 2j * np.pi * complex(xi) * op.times
    return np.exp(arg), np.exp(-arg)


def residual_matrix(op, xi):
    """R(xi) = W(xi) P_R W(-xi) as a dense matrix."""
    _check_guard(op, xi)
    wp, wm = _weights(op, xi)
    return (wp[:, None] * op.p_r) * wm[None, :]


def residual_derivative(op, xi, n):
    """n-th derivative of the residual matrix via the commutator recursion."""
    if n < 1:
        raise ValueError("derivative order must be >= 1")
    r = residual_matrix(op, xi)
    t = op.times
    for _ in range(n):
        r = 2j * np.pi * (t[:, None] * r - r * t[None, :])
    return r


def _apply(op, kernel, wp, wm, s):
    """W(xi) K W(-xi) s with a precomputed entrywise kernel K."""
    return wp * (kernel @ (wm * s))


def residual_value(op, xi, s):
    """f0(xi) = 0.5 * ||R(xi) s||^2."""
    _check_guard(op, xi)
    wp, wm = _weights(op, xi)
    rs = _apply(op, op.p_r, wp, wm, np.asarray(s, dtype=complex))
    return 0.5 * float(np.vdot(rs, rs).real)


@dataclass(frozen=True)
class WirtingerGradient:
    d_xi: complex

    @property
    def d_xi_conj(self):
        """For real objectives the xi* derivative is the conjugate."""
        return np.conj(self.d_xi)

    @property
    def real_chart(self):
        """Gradient as a complex number in the (Re, Im) chart."""
        return 2.0 * np.conj(self.d_xi)


@dataclass(frozen=True)
class WirtingerHessian:
    d_xixi: complex
    d_xixiconj: float


def _pieces(op, xi, s):
    """R s, R' s, R'' s at one parameter value."""
    _check_guard(op, xi)
    s = np.asarray(s, dtype=complex)
    wp, wm = _weights(op, xi)
    u = wm * s
    rs = wp * (op.p_r @ u)
    r1s = wp * (op.p_r1 @ u)
    r2s = wp * (op.p_r2 @ u)
    return rs, r1s, r2s


def wirtinger_gradient_f0(op, xi, s):
    """d_xi f0 = 0.5 <s, R(xi*) R'(xi) s> = 0.5 <R(xi) s, R'(xi) s>."""
    rs, r1s, _ = _pieces(op, xi, s)
    return WirtingerGradient(d_xi=0.5 * np.vdot(rs, r1s))


def wirtinger_hessian_f0(op, xi, s):
    """Second Wirtinger derivatives of f0.

    ``d_xixi = 0.5 <R(xi) s, R''(xi) s>`` and
    ``d_xixiconj = 0.5 ||R'(xi) s||^2``; together they assemble the
    curvature form ``|eta|^2 ||R' s||^2 + Re(eta^2 <s, R(xi*) R'' s>)``.
    """
    rs, r1s, r2s = _pieces(op, xi, s)
    return WirtingerHessian(
        d_xixi=0.5 * np.vdot(rs, r2s),
        d_xixiconj=0.5 * float(np.vdot(r1s, r1s).real),
    )


def hessian_quadratic_form(h, eta):
    """Action of the Wirtinger Hessian on the direction pair (eta, eta*)."""
    eta = complex(eta)
    return float(2.0 * h.d_xixiconj * abs(eta) ** 2 + 2.0 * np.real(eta * eta * h.d_xixi))


def concentrations_ri(op, xi, s):
    """Oblique estimate Phi^+ W(-xi) s; exact on noiseless signals."""
    _check_guard(op, xi)
    _, wm = _weights(op, xi)
    return op.phi_pinv @ (wm * np.asarray(s, dtype=complex))


def concentrations_mp(op, xi, s):
    """Least-squares estimate M(xi)^+ s with M(xi) = W(xi) Phi.

    Coincides with :func:`concentrations_ri` for real ``xi`` (unitary
    weighting); differs once decay makes ``W`` non-unitary.
    """
    _check_guard(op, xi)
    wp, _ = _weights(op, xi)
    m = wp[:, None] * op.model.phi
    return np.linalg.lstsq(m, np.asarray(s, dtype=complex), rcond=None)[0]


@dataclass(frozen=True)
class FullResidualEval:
    value: float
    grad_xi: WirtingerGradient
    grad_s_conj: np.ndarray  # d f / d s*, one entry per echo


def full_residual(op, xi, s):
    """f(xi, s) = 0.5 ||R(xi) s||^2 with gradients in both blocks.

    The signal-block derivative is ``d_{s*} f = 0.5 R(xi)* R(xi) s``; the
    corresponding real-chart gradient is ``2 d_{s*} f`` componentwise.
    """
    s = np.asarray(s, dtype=complex)
    if s.shape != (op.n_e,):
        raise DimensionError(f"signal has shape {s.shape}, expected ({op.n_e},)")
    rs, r1s, _ = _pieces(op, xi, s)
    wp, wm = _weights(op, xi)
    # R(xi)^H v = R(xi*) v = conj(wm) * (P_R @ (conj(wp) * v))
    rhrs = np.conj(wm) * (op.p_r @ (np.conj(wp) * rs))
    return FullResidualEval(
        value=0.5 * float(np.vdot(rs, rs).real),
        grad_xi=WirtingerGradient(d_xi=0.5 * np.vdot(rs, r1s)),
        grad_s_conj=0.5 * rhrs,
    )


def voxelwise_value_and_gradient(op, xi_flat, s_flat):
    """f0 and d_xi f0 for a batch of voxels; used by the imaging solver.

    ``xi_flat`` has shape (n,), ``s_flat`` shape (n, n_e). Entries whose
    signal is zero return zero value and gradient.
    """
    xi = np.asarray(xi_flat, dtype=complex)
    if np.any(np.abs(xi.imag) * op.times[-1] > EXP_GUARD):
        raise OverflowRisk("batch contains xi beyond the exp overflow guard")
    s = np.asarray(s_flat, dtype=complex)
    arg = 2j * np.pi * xi[:, None] * op.times[None, :]
    wp = np.exp(arg)
    u = np.exp(-arg) * s
    rs = wp * (u @ op.p_r.T)
    r1s = wp * (u @ op.p_r1.T)
    f = 0.5 * np.sum(np.abs(rs) ** 2, axis=1)
    d_xi = 0.5 * np.sum(np.conj(rs) * r1s, axis=1)
    return f, d_xi


def voxelwise_signal_gradient(op, xi_flat, s_flat):
    """d_{s*} f = 0.5 R(xi)* R(xi) s for a batch of voxels."""
    xi = np.asarray(xi_flat, dtype=complex)
    s = np.asarray(s_flat, dtype=complex)
    arg = 2j * np.pi * xi[:, None] * op.times[None, :]
    wp = np.exp(arg)
    wm = np.exp(-arg)
    rs = wp * ((wm * s) @ op.p_r.T)
    return 0.5 * np.conj(wm) * ((np.conj(wp) * rs) @ op.p_r.T)


def voxelwise_concentrations(op, xi_flat, s_flat):
    """Phi^+ W(-xi) s for a batch of voxels."""
    xi = np.asarray(xi_flat, dtype=complex)
    s = np.asarray(s_flat, dtype=complex)
    u = np.exp(-2j * np.pi * xi[:, None] * op.times[None, :]) * s
    return u @ op.phi_pinv.T
