"""Identifiability analysis: solution lattice and the zero set of Delta(eta).

Two fieldmap values ``xi`` and ``xi + eta`` explain the same signal exactly
when the stacked matrix ``Delta(eta) = [W(eta) Phi, Phi]`` has a kernel
vector of the right structure. For commensurable echo times every diagonal
entry of ``W(eta)`` is an integer power of ``z = exp(2*pi*i*eta*t_max/q)``,
so every ``2 n_s x 2 n_s`` minor of ``Delta`` is a polynomial in ``z`` and
the zero set can be computed by companion-matrix root finding instead of a
dense scan.

Kernel structure at a zero decides what can go wrong there:

* every kernel vector of the form ``(c, -c)``: any signal-consistent
  solution at that shift keeps the true concentrations (exact recovery);
* a full ``n_s``-dimensional kernel otherwise: ``W(-eta)`` maps
  ``range(Phi)`` to itself and its eigendecomposition produces a basis and
  unit phases that generate swapped concentrations for generic ``c``;
* a lower-dimensional kernel otherwise: only concentrations inside a
  measure-zero subspace admit a swapped partner, read off the kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from math import comb, gcd, inf, lcm

import numpy as np

from .errors import CombinatorialLimit, DimensionError, PolynomialDegreeLimit
from .species import weighting_diag

__all__ = [
    "EXACT_RECOVERY",
    "SWAP_RISK",
    "RationalEchoStructure",
    "SolutionLattice",
    "DeltaZero",
    "DeltaZeroSet",
    "rationalize_echoes",
    "fieldmap_lattice",
    "delta_matrix",
    "delta_zero_set",
    "swap_concentrations",
    "local_identifiability_certificate",
    "sigma_min_profile",
    "weighting_error_profile",
]

EXACT_RECOVERY = "ExactRecovery"
SWAP_RISK = "SwapRisk"


@dataclass(frozen=True)
class RationalEchoStructure:
    """Rationalization t_k/t_max = p_k/q_k over a support of echo indices."""

    support: tuple[int, ...]
    t_max: float
    fractions: tuple[tuple[int, int], ...]
    p: int
    q: int
    commensurable: bool


@dataclass(frozen=True)
class SolutionLattice:
    """Spacing of the set of signal-preserving real fieldmap shifts."""

    period_hz: float

    @property
    def trivial(self):
        """True when the only signal-preserving shift is zero."""
        return not np.isfinite(self.period_hz)

    def nearest_index(self, shift_hz):
        if self.trivial:
            return 0
        return int(np.round(shift_hz / self.period_hz))


def rationalize_echoes(echoes, support=None, denom_limit=10**4, rel_tol=1e-12):
    """Rationalize the echo-time ratios over the given support.

    Each ratio ``t_k/t_max`` is replaced by its best rational approximation
    with denominator at most ``denom_limit`` (continued-fraction based).
    The structure is commensurable only when every approximation is within
    ``rel_tol`` of the ratio; echo tables quoted at scanner granularity are
    exact rationals well inside that budget, while genuinely irrational
    ratios are flagged rather than rounded.
    """
    times = np.asarray(echoes.times_s, dtype=float)
    if support is None:
        support = tuple(range(len(times)))
    support = tuple(sorted(int(k) for k in support))
    if len(support) == 0:
        raise DimensionError("support must be non-empty")
    sub = times[list(support)]
    t_max = float(sub.max())

    fractions = []
    commensurable = True
    for t in sub:
        ratio = t / t_max
        frac = Fraction(ratio).limit_denominator(denom_limit)
        if abs(float(frac) - ratio) > rel_tol:
            commensurable = False
        fractions.append((frac.numerator, frac.denominator))

    if commensurable:
        p = lcm(*(pk for pk, _ in fractions))
        q = lcm(*(p * qk // pk for pk, qk in fractions))
    else:
        p = q = 0
    return RationalEchoStructure(
        support=support,
        t_max=t_max,
        fractions=tuple(fractions),
        p=p,
        q=q,
        commensurable=commensurable,
    )


def fieldmap_lattice(structure):
    """Lattice of shifts ``eta`` with ``exp(2*pi*i*eta*t_k) = 1`` on the support."""
    if not structure.commensurable:
        return SolutionLattice(period_hz=inf)
    return SolutionLattice(period_hz=(structure.q / structure.p) / structure.t_max)


def delta_matrix(eta, model):
    """The ``n_e x 2 n_s`` matrix ``[W(eta) Phi, Phi]``."""
    w = weighting_diag(eta, model.times)
    return np.hstack([w[:, None] * model.phi, model.phi])


@dataclass(frozen=True)
class DeltaZero:
    """One element of the zero set with its kernel diagnosis."""

    eta_hz: float
    sigma_min: float
    kernel_dim: int
    classification: str
    swap_phases: tuple[complex, ...] | None = None
    swap_basis: np.ndarray | None = None
    kernel: np.ndarray | None = None

    @property
    def exact_recovery(self):
        return self.classification == EXACT_RECOVERY


@dataclass(frozen=True)
class DeltaZeroSet:
    zeros: tuple[DeltaZero, ...]
    w_period_hz: float
    sigma_ref: float

    def etas(self):
        return np.array([z.eta_hz for z in self.zeros])


def _minor_polynomial(phi, rows, exponents):
    """det of the [W Phi, Phi] minor on ``rows`` as {exponent: coefficient}.

    Laplace expansion by complementary minors along the first n_s columns;
    the W block contributes z**(sum of row exponents) times a Phi minor.
    """
    n_s = phi.shape[1]
    base = n_s * (n_s + 1) // 2
    coeffs: dict[int, complex] = {}
    for subset in combinations(range(len(rows)), n_s):
        comp = tuple(i for i in range(len(rows)) if i not in subset)
        sign = -1 if ((sum(subset) + len(subset) + base) % 2) else 1
        det_a = np.linalg.det(phi[[rows[i] for i in subset], :])
        det_b = np.linalg.det(phi[[rows[i] for i in comp], :])
        e = int(sum(exponents[rows[i]] for i in subset))
        coeffs[e] = coeffs.get(e, 0.0) + sign * det_a * det_b
    return coeffs


def _unit_circle_roots(coeffs, degree_limit, unit_tol=1e-5):
    # multiple roots (kernel dimension > 1) come out of the companion
    # matrix with |z| off the circle by roughly sqrt(machine epsilon), so
    # the modulus filter must sit well above that; impostors that slip
    # through are removed later by the sigma_min classification.
    """Unit-modulus roots of a sparse-coefficient polynomial in z."""

    exps = sorted(coeffs)
    lo, hi = exps[0], exps[-1]
    if hi == lo:
        return np.empty(0, dtype=complex)  # monomial: only z = 0
    g = 0
    for e in exps:
        g = gcd(g, e - lo)
    degree = (hi - lo) // g
    if degree > degree_limit:
        raise PolynomialDegreeLimit(
            f"determinant polynomial degree {degree} exceeds the guard {degree_limit}"
        )
    dense = np.zeros(degree + 1, dtype=complex)
    for e, c in coeffs.items():
        dense[degree - (e - lo) // g] = c  # np.roots wants highest power first
    scale = np.max(np.abs(dense))
    roots_w = np.roots(dense / scale)

    # a few Newton polishing steps in w, then expand w = z**g
    exps_arr = np.arange(degree, -1, -1)
    for _ in range(3):
        pw = np.polyval(dense, roots_w)
        dpw = np.polyval(dense[:-1] * exps_arr[:-1], roots_w)
        step = np.where(np.abs(dpw) > 0, pw / np.where(dpw == 0, 1, dpw), 0.0)
        roots_w = roots_w - step
    roots_w = roots_w[np.abs(np.abs(roots_w) - 1.0) < unit_tol]
    if g == 1:
        return roots_w
    kth = np.exp(2j * np.pi * np.arange(g) / g)
    return (roots_w[:, None] ** (1.0 / g) * kth[None, :]).ravel()


def _polish_zero(model, eta_hz, half_width_hz, iters=90):
    """Golden-section refinement of a local minimum of sigma_min(Delta)."""

    def smin(eta):
        return float(np.linalg.svd(delta_matrix(eta, model), compute_uv=False)[-1])

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = eta_hz - half_width_hz, eta_hz + half_width_hz
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = smin(c), smin(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = smin(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = smin(d)
        if b - a <= 1e-13 * max(1.0, abs(eta_hz)):
            break
    return (a + b) / 2.0


def _cluster_angles(values, radius):
    """Merge a sorted 1-D array into cluster centers with the given radius."""
    if len(values) == 0:
        return values
    values = np.sort(values)
    centers = []
    start = 0
    for i in range(1, len(values) + 1):
        if i == len(values) or values[i] - values[i - 1] > radius:
            centers.append(values[start:i].mean())
            start = i
    return np.array(centers)


def _orthonormal_eigensystem(matrix, cluster_tol=1e-8):
    """Eigendecomposition with per-eigenvalue-cluster orthonormalization."""
    evals, evecs = np.linalg.eig(matrix)
    order = np.argsort(np.angle(evals))
    evals, evecs = evals[order], evecs[:, order]
    phases = np.empty_like(evals)
    basis = np.empty_like(evecs)
    start = 0
    n = len(evals)
    for i in range(1, n + 1):
        if i == n or abs(evals[i] - evals[start]) > cluster_tol:
            block = evecs[:, start:i]
            qblock, _ = np.linalg.qr(block)
            basis[:, start:i] = qblock
            phases[start:i] = evals[start:i]
            start = i
    return phases, basis


def classify_zero(model, eta_hz, sigma_ref, tol=1e-8, exact_tol=1e-6):
    """Diagnose the kernel of ``Delta(eta)``; None when there is no kernel."""
    delta = delta_matrix(eta_hz, model)
    _, svals, vh = np.linalg.svd(delta)
    n_s = model.n_s
    svals = np.concatenate([svals, np.zeros(2 * n_s - len(svals))])
    kernel_dim = int(np.sum(svals < tol * sigma_ref))
    if kernel_dim == 0:
        return None
    kernel = vh.conj().T[:, 2 * n_s - kernel_dim:]
    sigma_min = float(svals[-1])

    mixing = np.linalg.norm(kernel[:n_s] + kernel[n_s:], 2)
    if mixing <= exact_tol:
        return DeltaZero(
            eta_hz=float(eta_hz),
            sigma_min=sigma_min,
            kernel_dim=kernel_dim,
            classification=EXACT_RECOVERY,
            kernel=kernel,
        )

    swap_phases = None
    swap_basis = None
    if kernel_dim == n_s:
        # range(Phi) is invariant under W(-eta); represent that restriction
        # on concentration space and take its eigensystem
        w_minus = weighting_diag(-eta_hz, model.times)
        phi_pinv = np.linalg.pinv(model.phi)
        restricted = phi_pinv @ (w_minus[:, None] * model.phi)
        invariance = np.linalg.norm(
            model.phi @ restricted - w_minus[:, None] * model.phi
        )
        if invariance <= exact_tol * np.linalg.norm(model.phi):
            phases, basis = _orthonormal_eigensystem(restricted)
            swap_phases = tuple(phases)
            swap_basis = basis
    return DeltaZero(
        eta_hz=float(eta_hz),
        sigma_min=sigma_min,
        kernel_dim=kernel_dim,
        classification=SWAP_RISK,
        swap_phases=swap_phases,
        swap_basis=swap_basis,
        kernel=kernel,
    )


def swap_concentrations(zero, c0):
    """Concentrations that alias ``c0`` at the given zero's fieldmap shift.

    Valid for swap zeros carrying a basis: returns
    ``sum_l phase_l <u_l, c0> u_l``, which satisfies
    ``W(eta) Phi c = Phi c0`` for any ``c0``.
    """
    if zero.swap_basis is None or zero.swap_phases is None:
        raise ValueError("zero carries no swap basis; use its kernel directly")
    u = zero.swap_basis
    phases = np.asarray(zero.swap_phases)
    return u @ (phases * (u.conj().T @ np.asarray(c0, dtype=complex)))


def delta_zero_set(
    model,
    search_band_hz=(-1000.0, 1000.0),
    tol=1e-8,
    denom_limit=10**4,
    degree_limit=10**4,
    cluster_radius_hz=1e-6,
    max_selections=10**6,
    intersect_radius_hz=None,
):
    """Zero set of ``sigma_min(Delta(eta))`` inside the search band.

    Requires ``n_e >= 2 n_s`` (below that the kernel is never empty and the
    zero set is the whole line). For incommensurable echoes the set is just
    ``{0}``; otherwise each row selection's determinant polynomial in ``z``
    is solved by companion-matrix eigenvalues, unit-circle roots are mapped
    back to ``eta``, intersected across selections, and each survivor is
    classified through its kernel.
    """
    n_e, n_s = model.n_e, model.n_s
    if n_e < 2 * n_s:
        raise DimensionError(
            f"polynomial zero-set search needs n_e >= 2 n_s, got {n_e} < {2 * n_s}"
        )
    sigma_ref = float(np.linalg.svd(delta_matrix(0.0, model), compute_uv=False)[0])
    band_lo, band_hi = float(search_band_hz[0]), float(search_band_hz[1])

    structure = rationalize_echoes(model.echoes, denom_limit=denom_limit)
    if not structure.commensurable:
        zero = classify_zero(model, 0.0, sigma_ref, tol=tol)
        zeros = (zero,) if (zero is not None and band_lo <= 0.0 <= band_hi) else ()
        return DeltaZeroSet(zeros=zeros, w_period_hz=inf, sigma_ref=sigma_ref)

    q = lcm(*(qk for _, qk in structure.fractions))
    exponents = [pk * q // qk for pk, qk in structure.fractions]
    w_period = q / structure.t_max  # W(eta + w_period) = W(eta) exactly

    n_sel = comb(n_e, 2 * n_s)
    if n_sel > max_selections:
        raise CombinatorialLimit(f"{n_sel} selections exceed the guard {max_selections}")

    base_sets = []
    for rows in combinations(range(n_e), 2 * n_s):
        coeffs = _minor_polynomial(model.phi, rows, exponents)
        roots = _unit_circle_roots(coeffs, degree_limit)
        # angles in [0, 2*pi) -> eta in [0, w_period)
        angles = np.mod(np.angle(roots), 2 * np.pi)
        etas = angles * w_period / (2 * np.pi)
        etas = np.mod(etas, w_period)
        base_sets.append(_cluster_angles(etas, cluster_radius_hz))

    # companion eigenvalues of multiple roots scatter like a fractional power
    # of machine epsilon, so intersect selections with a period-scaled slack
    # and recover full accuracy afterwards by polishing sigma_min itself
    if intersect_radius_hz is None:
        intersect_radius_hz = max(cluster_radius_hz, 1e-6 * w_period)
    common = base_sets[0]
    for other in base_sets[1:]:
        if len(common) == 0:
            break
        keep = np.zeros(len(common), dtype=bool)
        for i, eta in enumerate(common):
            diff = np.abs(other - eta)
            diff = np.minimum(diff, w_period - diff)  # periodic distance
            keep[i] = bool(len(other)) and diff.min() <= intersect_radius_hz
        common = common[keep]
    common = _cluster_angles(common, 2 * intersect_radius_hz)

    zeros = []
    for eta0 in common:
        eta0 = _polish_zero(model, float(eta0), 2 * intersect_radius_hz + 1e-4)
        shifts = np.arange(
            np.ceil((band_lo - eta0) / w_period), np.floor((band_hi - eta0) / w_period) + 1
        )
        for m in shifts:
            eta = float(eta0 + m * w_period)
            zero = classify_zero(model, eta, sigma_ref, tol=tol)
            if zero is not None:
                zeros.append(zero)
    zeros.sort(key=lambda z: z.eta_hz)

    dedupe_radius = max(cluster_radius_hz, 1e-9 * w_period)
    deduped = []
    for z in zeros:
        if deduped and abs(z.eta_hz - deduped[-1].eta_hz) <= dedupe_radius:
            continue
        deduped.append(z)
    return DeltaZeroSet(zeros=tuple(deduped), w_period_hz=w_period, sigma_ref=sigma_ref)


@dataclass(frozen=True)
class IdentifiabilityReport:
    residual_norm: float
    suspect: bool
    reason: str = ""


def local_identifiability_certificate(xi0, c0, model, tol=1e-8):
    """Necessary-condition check for a parameter pair to be ambiguous.

    In the regime ``n_s <= n_e <= 2 n_s`` a non-locally-identifiable pair
    must satisfy ``T s0 = W(xi0) Phi c`` for some concentrations ``c``; a
    tiny least-squares residual therefore marks the pair as suspect. The
    condition is only necessary, so ``suspect=True`` is never a proof.
    """
    if model.n_e > 2 * model.n_s:
        return IdentifiabilityReport(
            residual_norm=float("nan"),
            suspect=False,
            reason=f"regime guard: n_e={model.n_e} > 2 n_s={2 * model.n_s}",
        )
    c0 = np.asarray(c0, dtype=complex)
    s0 = weighting_diag(xi0, model.times) * (model.phi @ c0)
    target = model.times * s0
    design = weighting_diag(xi0, model.times)[:, None] * model.phi
    coeffs = np.linalg.lstsq(design, target, rcond=None)[0]
    residual = float(np.linalg.norm(target - design @ coeffs))
    return IdentifiabilityReport(
        residual_norm=residual,
        suspect=bool(residual < tol * max(np.linalg.norm(target), 1e-300)),
    )


def sigma_min_profile(model, eta_hz_grid):
    """sigma_min(Delta(eta)) over a grid, vectorized over eta."""
    grid = np.asarray(eta_hz_grid, dtype=float)
    w = np.exp(2j * np.pi * grid[:, None] * model.times[None, :])
    stack = np.concatenate(
        [w[:, :, None] * model.phi[None, :, :], np.broadcast_to(model.phi, (len(grid),) + model.phi.shape)],
        axis=2,
    )
    svals = np.linalg.svd(stack, compute_uv=False)
    return svals[:, -1]


def weighting_error_profile(phi_hz_grid, s_tilde, times_s):
    """|| (I - W(phi)) s_tilde ||_2 over a real fieldmap grid, vectorized."""
    grid = np.asarray(phi_hz_grid, dtype=float)
    t = np.asarray(times_s, dtype=float)
    mag2 = np.abs(np.asarray(s_tilde)) ** 2
    # |1 - exp(2 pi i phi t)|^2 = 2 (1 - cos(2 pi phi t))
    err2 = (2.0 * (1.0 - np.cos(2 * np.pi * np.outer(grid, t)))) @ mag2
    return np.sqrt(np.maximum(err2, 0.0))
