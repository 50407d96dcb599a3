"""Single-voxel recovery: the residual landscape and certified descent.

The oblique-projection residual f0 depends only on the complex parameter
xi, not the concentrations, and is locally strongly convex around the
truth. Fixed-step Wirtinger flow therefore recovers xi0 exactly from any
initial iterate inside a certified radius. Three nested radius bounds are
computed per voxel; the closed-form Lambert bound is very conservative,
the numerically solved monotonicity radius is orders of magnitude larger,
and the curvature profile Q(r) shows how far positivity actually extends.
"""

import numpy as np

from csemri import (
    EchoSpec,
    FlowConfig,
    build_model,
    concentrations_ri,
    curvature_profile,
    load_species,
    make_residual_operator,
    radius_empirical_from_profile,
    radius_lambert,
    radius_loose,
    radius_tight,
    residual_value,
    signal,
    wirtinger_flow,
)

HZ_PER_PPM_3T = 3.0 * 42.57747892
model = build_model(
    [load_species("water"), load_species("fat6", hz_per_ppm=HZ_PER_PPM_3T)],
    EchoSpec.uniform_ms(1.238, 0.986, 6),
)
op = make_residual_operator(model)

xi0 = 18.0 + 22.0j
c0 = np.array([0.65, 0.35 + 0j])
s0 = signal(xi0, c0, model)

print("residual f0 along the real fieldmap axis (zero only at the truth):")
for offset in (0.0, 5.0, 20.0, 100.0, 476.19):
    print(f"  f0(xi0 + {offset:7.2f}) = {residual_value(op, xi0 + offset, s0):.3e}")

rho = 0.5
r_lam = radius_lambert(op, xi0, s0, rho)
r_loose = radius_loose(op, xi0, s0, rho)
r_tight = radius_tight(op, xi0, s0, rho)
profile = curvature_profile(op, xi0, s0, np.geomspace(1.0, 150.0, 18), angular_samples=24)
r_emp = radius_empirical_from_profile(profile)
print(f"\ncertified radii (rho = {rho}):")
print(f"  lambert   {r_lam:10.5f} Hz   (closed form, severe underestimate)")
print(f"  loose     {r_loose:10.5f} Hz   (exact perturbation envelope)")
print(f"  tight     {r_tight:10.3f} Hz   (numerical monotonicity radius)")
print(f"  Q crosses zero near {r_emp:.1f} Hz")

print("\nQ(r) profile:")
for r, q in profile[::3]:
    print(f"  r = {r:7.2f} Hz   Q = {q:7.4f}")

# descend from an iterate near the edge of the tight radius
xi_init = xi0 + 0.9 * r_tight * np.exp(1j * 0.4)
res = wirtinger_flow(op, s0, xi_init, FlowConfig(certified=True, keep_trajectory=True))
print(f"\nWirtinger flow from |xi - xi0| = {abs(xi_init - xi0):.2f} Hz:")
print(f"  converged = {res.converged} after {res.iterations} iterations")
print(f"  |xi_hat - xi0| = {abs(res.xi_hat - xi0):.2e} Hz")
print(f"  concentration error = {np.linalg.norm(res.c_hat - c0):.2e}")
dist = np.abs(np.array(res.trajectory) - xi0)
marks = np.unique(np.geomspace(1, len(dist) - 1, 8).astype(int))
print("  distance to truth along the trajectory:")
for k in marks:
    print(f"    iter {k:5d}: {dist[k]:.3e} Hz")

# the concentrations drop out in closed form once xi is known
print("\nclosed-form concentrations at the recovered parameter:")
print(np.array_str(concentrations_ri(op, res.xi_hat, s0), precision=6))
