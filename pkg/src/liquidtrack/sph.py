"""Weakly compressible SPH solver.

One solver step runs: rebuild the neighbor index, density pass, equation
of state, force passes (pressure, viscosity, surface tension, gravity,
optional external field), explicit integration, then contact resolution
against the scene. All passes are vectorized over the half-pair list
produced by the neighbor index and accumulate with `np.bincount`, which
keeps reductions in a fixed order so identical inputs give bit-identical
results.

Conventions baked in here:

* A particle contributes to its own density (W(0) > 0) but never to its
  own force terms (the kernel gradient is zero at the origin).
* The pressure pair term uses the symmetrized volume prefactor
  0.5 * m * (1/rho_i + 1/rho_j), so the contribution to i from j is the
  exact negation of the contribution to j from i and momentum is
  conserved to rounding. At uniform density this equals the one-sided
  prefactor m/rho_j.
* The default viscosity term sums the two velocity terms
  (v_i/rho_i^2 + v_j/rho_j^2), which acts as a drag on absolute motion;
  the "difference" form flips the sign of the second term and damps
  relative motion instead.
* Surface normals point out of the liquid; the tension force pulls
  gated surface particles back toward the interior.
* Gravity enters as a force density rho * g, matching the velocity
  update v += (f / rho) * dt.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .kernels import KernelSet
from .neighbors import NeighborIndex
from .particles import FluidParams, ParticleSet

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap

__all__ = [
    "NonFiniteStateError",
    "PairData",
    "StepInfo",
    "accumulate_gravity",
    "accumulate_pressure_forces",
    "accumulate_tension_forces",
    "accumulate_viscosity_forces",
    "compute_densities",
    "compute_normals",
    "compute_pressures",
    "integrate_step",
    "step",
]

log = logging.getLogger(__name__)


class NonFiniteStateError(RuntimeError):
    """A particle position or velocity became NaN or infinite."""


@dataclass
class PairData:
    """Half-pair neighbor list shared by the per-step passes.

    Kernel evaluations are computed once on first use and reused by every
    force pass in the step.
    """

    i: np.ndarray
    j: np.ndarray
    disp: np.ndarray
    dist: np.ndarray
    _kern: KernelSet | None = None
    _w: np.ndarray | None = None
    _grad: np.ndarray | None = None
    _lap: np.ndarray | None = None

    @classmethod
    def from_index(cls, index: NeighborIndex) -> "PairData":
        i, j, disp, dist = index.pairs()
        return cls(i=i, j=j, disp=disp, dist=dist)

    def _ensure(self, kern: KernelSet):
        if self._kern is None or self._kern.h != kern.h:
            self._kern = kern
            self._w = None
            self._grad = None
            self._lap = None

    def w(self, kern: KernelSet) -> np.ndarray:
        self._ensure(kern)
        if self._w is None:
            self._w = kern.w(self.dist)
        return self._w

    def grad(self, kern: KernelSet) -> np.ndarray:
        self._ensure(kern)
        if self._grad is None:
            self._grad = kern.grad_w(self.disp, self.dist)
        return self._grad

    def lap(self, kern: KernelSet) -> np.ndarray:
        self._ensure(kern)
        if self._lap is None:
            self._lap = kern.lap_w(self.dist)
        return self._lap


@dataclass
class StepInfo:
    """Per-step diagnostics."""

    escaped: int = 0


def _scatter(target: np.ndarray, idx: np.ndarray, values: np.ndarray):
    """Add per-pair vector values into per-particle rows of target."""
    n = target.shape[0]
    for k in range(3):
        target[:, k] += np.bincount(idx, weights=values[:, k], minlength=n)


def _force_density(particles: ParticleSet, params: FluidParams) -> np.ndarray:
    """Density as seen by force denominators: floored for sparse particles."""
    return np.maximum(particles.densities, params.density_floor_factor * params.rest_density)


def compute_densities(particles: ParticleSet, params: FluidParams, index, pair_data=None):
    """Kernel-weighted mass sum, including each particle's self term."""
    kern = KernelSet(params.kernel_radius)
    pd = pair_data or PairData.from_index(index)
    n = particles.n
    rho = np.full(n, params.particle_mass * kern.w0)
    if len(pd.i):
        w = pd.w(kern) * params.particle_mass
        rho += np.bincount(pd.i, weights=w, minlength=n)
        rho += np.bincount(pd.j, weights=w, minlength=n)
    particles.densities = rho
    return rho


def compute_pressures(particles: ParticleSet, params: FluidParams):
    """Equation of state p = c^2 (rho - rho0); negative values kept as-is."""
    c2 = params.sound_speed**2
    particles.pressures = c2 * (particles.densities - params.rest_density)
    return particles.pressures


def accumulate_pressure_forces(particles: ParticleSet, params: FluidParams, index, pair_data=None):
    """Pairwise antisymmetric pressure forces added to the accumulators.

    In the default "clamped" mode, negative (tensile) pressures enter the
    pair factor as zero: the bare tensile term is violently unstable for
    sparse particles, whose p / rho^2 factor diverges as density drops.
    The stored pressure field itself keeps its negative values.
    """
    pd = pair_data or PairData.from_index(index)
    if not len(pd.i):
        return
    kern = KernelSet(params.kernel_radius)
    rho = _force_density(particles, params)
    rho_i = rho[pd.i]
    rho_j = rho[pd.j]
    p = particles.pressures
    if params.negative_pressure == "clamped":
        p = np.maximum(p, 0.0)
    sym = p[pd.i] / rho_i**2 + p[pd.j] / rho_j**2
    vol = 0.5 * params.particle_mass * (1.0 / rho_i + 1.0 / rho_j)
    term = -(vol * sym)[:, None] * pd.grad(kern)
    _scatter(particles.forces, pd.i, term)
    _scatter(particles.forces, pd.j, -term)


def accumulate_viscosity_forces(particles: ParticleSet, params: FluidParams, index, pair_data=None):
    """Viscosity forces in the configured form added to the accumulators."""
    if params.viscosity == 0.0:
        return
    pd = pair_data or PairData.from_index(index)
    if not len(pd.i):
        return
    kern = KernelSet(params.kernel_radius)
    lap = pd.lap(kern)
    rho = _force_density(particles, params)
    rho_i = rho[pd.i]
    rho_j = rho[pd.j]
    vi = particles.velocities[pd.i] / (rho_i**2)[:, None]
    vj = particles.velocities[pd.j] / (rho_j**2)[:, None]
    mu_m = params.viscosity * params.particle_mass
    coef_i = (mu_m / rho_j * lap)[:, None]
    coef_j = (mu_m / rho_i * lap)[:, None]
    if params.viscosity_form == "paper":
        vel = vi + vj
        _scatter(particles.forces, pd.i, -coef_i * vel)
        _scatter(particles.forces, pd.j, -coef_j * vel)
    else:
        vel = vi - vj
        _scatter(particles.forces, pd.i, -coef_i * vel)
        _scatter(particles.forces, pd.j, coef_j * vel)


def compute_normals(particles: ParticleSet, params: FluidParams, index, pair_data=None):
    """Outward surface normals from the smoothed volume gradient.

    Interior particles of a uniform arrangement get near-zero normals;
    particles on a free surface get normals pointing out of the bulk.
    """
    pd = pair_data or PairData.from_index(index)
    n = particles.n
    normals = np.zeros((n, 3))
    if len(pd.i):
        kern = KernelSet(params.kernel_radius)
        grad = pd.grad(kern)
        m = params.particle_mass
        rho = _force_density(particles, params)
        contrib_i = (m / rho[pd.j])[:, None] * grad
        contrib_j = -(m / rho[pd.i])[:, None] * grad
        _scatter(normals, pd.i, contrib_i)
        _scatter(normals, pd.j, contrib_j)
        np.negative(normals, out=normals)
    return normals


def accumulate_tension_forces(
    particles: ParticleSet, normals: np.ndarray, params: FluidParams, index, pair_data=None
):
    """Surface tension for particles whose normal magnitude passes the gate."""
    if params.tension == 0.0:
        return
    pd = pair_data or PairData.from_index(index)
    n = particles.n
    kern = KernelSet(params.kernel_radius)
    lap_sum = np.zeros(n)
    if len(pd.i):
        lap = pd.lap(kern)
        m = params.particle_mass
        rho = _force_density(particles, params)
        lap_sum += np.bincount(pd.i, weights=m / rho[pd.j] * lap, minlength=n)
        lap_sum += np.bincount(pd.j, weights=m / rho[pd.i] * lap, minlength=n)
    mag = np.linalg.norm(normals, axis=1)
    gate = mag > params.normal_threshold
    if not np.any(gate):
        return
    unit = normals[gate] / mag[gate][:, None]
    particles.forces[gate] += -params.tension * unit * lap_sum[gate][:, None]


def accumulate_gravity(particles: ParticleSet, params: FluidParams):
    """Gravity as a force density rho * g."""
    g = np.asarray(params.gravity)
    particles.forces += _force_density(particles, params)[:, None] * g


def integrate_step(particles: ParticleSet, params: FluidParams):
    """Explicit time integration; zeroes the force accumulators afterward.

    The symplectic variant advances velocity first and moves positions
    with the new velocity; the "paper" variant moves positions with the
    pre-update velocity.
    """
    dt = params.timestep
    accel = particles.forces / _force_density(particles, params)[:, None]
    if params.integrator == "paper":
        particles.positions += particles.velocities * dt
        particles.velocities += accel * dt
    else:
        particles.velocities += accel * dt
        particles.positions += particles.velocities * dt
    particles.forces[:] = 0.0
    bad = ~np.isfinite(particles.positions).all(axis=1)
    bad |= ~np.isfinite(particles.velocities).all(axis=1)
    if np.any(bad):
        first = int(particles.ids[np.nonzero(bad)[0][0]])
        raise NonFiniteStateError(
            f"non-finite state for particle id {first} "
            f"({int(bad.sum())} particles affected)"
        )


@njit(cache=True)
def _fused_pass(pos, vel, pi, pj, disp, dist, m, rho0, c2, mu, sigma, h,
                visc_paper, neg_clamp, rho_floor, normal_threshold, gx, gy, gz):
    """Density, equation of state, and all force terms in two pair sweeps.

    Mirrors the reference operations exactly (same formulas, same floored
    density in force denominators); accumulation order is fixed by the
    pair emission order.
    """
    n = pos.shape[0]
    npairs = pi.shape[0]
    c_poly6 = 315.0 / (64.0 * np.pi * h**9)
    c_spiky = 45.0 / (np.pi * h**6)
    c_visc = 45.0 / (np.pi * h**6)
    w0 = c_poly6 * (h * h) ** 3

    rho = np.full(n, m * w0)
    for k in range(npairs):
        d = dist[k]
        if d < h:
            q = h * h - d * d
            w = m * c_poly6 * q * q * q
            rho[pi[k]] += w
            rho[pj[k]] += w

    pressures = np.empty(n)
    rho_f = np.empty(n)
    floor_val = rho_floor * rho0
    for a in range(n):
        pressures[a] = c2 * (rho[a] - rho0)
        rho_f[a] = rho[a] if rho[a] > floor_val else floor_val

    forces = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    lap_sum = np.zeros(n)
    for k in range(npairs):
        a, b = pi[k], pj[k]
        d = dist[k]
        if d >= h:
            continue
        ra, rb = rho_f[a], rho_f[b]
        pa, pb = pressures[a], pressures[b]
        if neg_clamp:
            if pa < 0.0:
                pa = 0.0
            if pb < 0.0:
                pb = 0.0
        lap = c_visc * (h - d)
        if d > 0.0:
            gcoef = -c_spiky * (h - d) ** 2 / d
        else:
            gcoef = 0.0
        gxk = gcoef * disp[k, 0]
        gyk = gcoef * disp[k, 1]
        gzk = gcoef * disp[k, 2]

        sym = pa / (ra * ra) + pb / (rb * rb)
        volp = 0.5 * m * (1.0 / ra + 1.0 / rb)
        tp = -volp * sym
        forces[a, 0] += tp * gxk
        forces[a, 1] += tp * gyk
        forces[a, 2] += tp * gzk
        forces[b, 0] -= tp * gxk
        forces[b, 1] -= tp * gyk
        forces[b, 2] -= tp * gzk

        if mu > 0.0:
            ca = mu * m / rb * lap
            cb = mu * m / ra * lap
            if visc_paper:
                vx = vel[a, 0] / (ra * ra) + vel[b, 0] / (rb * rb)
                vy = vel[a, 1] / (ra * ra) + vel[b, 1] / (rb * rb)
                vz = vel[a, 2] / (ra * ra) + vel[b, 2] / (rb * rb)
                forces[a, 0] -= ca * vx
                forces[a, 1] -= ca * vy
                forces[a, 2] -= ca * vz
                forces[b, 0] -= cb * vx
                forces[b, 1] -= cb * vy
                forces[b, 2] -= cb * vz
            else:
                vx = vel[a, 0] / (ra * ra) - vel[b, 0] / (rb * rb)
                vy = vel[a, 1] / (ra * ra) - vel[b, 1] / (rb * rb)
                vz = vel[a, 2] / (ra * ra) - vel[b, 2] / (rb * rb)
                forces[a, 0] -= ca * vx
                forces[a, 1] -= ca * vy
                forces[a, 2] -= ca * vz
                forces[b, 0] += cb * vx
                forces[b, 1] += cb * vy
                forces[b, 2] += cb * vz

        va = m / rb
        vb = m / ra
        normals[a, 0] -= va * gxk
        normals[a, 1] -= va * gyk
        normals[a, 2] -= va * gzk
        normals[b, 0] += vb * gxk
        normals[b, 1] += vb * gyk
        normals[b, 2] += vb * gzk
        lap_sum[a] += va * lap
        lap_sum[b] += vb * lap

    for a in range(n):
        mag = np.sqrt(normals[a, 0] ** 2 + normals[a, 1] ** 2 + normals[a, 2] ** 2)
        if sigma > 0.0 and mag > normal_threshold:
            coef = -sigma * lap_sum[a] / mag
            forces[a, 0] += coef * normals[a, 0]
            forces[a, 1] += coef * normals[a, 1]
            forces[a, 2] += coef * normals[a, 2]
        forces[a, 0] += rho_f[a] * gx
        forces[a, 1] += rho_f[a] * gy
        forces[a, 2] += rho_f[a] * gz
    return rho, pressures, forces, normals


def _run_passes(particles: ParticleSet, params: FluidParams, index, pd: PairData):
    """Density, pressure, and force accumulation for one step."""
    if _HAVE_NUMBA:
        rho, pressures, forces, _ = _fused_pass(
            particles.positions,
            particles.velocities,
            pd.i,
            pd.j,
            pd.disp,
            pd.dist,
            params.particle_mass,
            params.rest_density,
            params.sound_speed**2,
            params.viscosity,
            params.tension,
            params.kernel_radius,
            params.viscosity_form == "paper",
            params.negative_pressure == "clamped",
            params.density_floor_factor,
            params.normal_threshold,
            params.gravity[0],
            params.gravity[1],
            params.gravity[2],
        )
        particles.densities = rho
        particles.pressures = pressures
        particles.forces += forces
        return
    compute_densities(particles, params, index, pd)
    compute_pressures(particles, params)
    accumulate_pressure_forces(particles, params, index, pd)
    accumulate_viscosity_forces(particles, params, index, pd)
    normals = compute_normals(particles, params, index, pd)
    accumulate_tension_forces(particles, normals, params, index, pd)
    accumulate_gravity(particles, params)


def step(
    particles: ParticleSet,
    scene_at_t,
    params: FluidParams,
    external_forces: np.ndarray | None = None,
) -> StepInfo:
    """Advance the state by one timestep.

    `scene_at_t` supplies collision resolution and scene bounds for the
    target time of this step; pass None to simulate without boundaries.
    `external_forces` is an optional (N, 3) force-density field added
    before integration.
    """
    info = StepInfo()
    if particles.n == 0:
        return info
    index = NeighborIndex(particles.positions, params.kernel_radius)
    pd = PairData.from_index(index)
    _run_passes(particles, params, index, pd)
    if external_forces is not None:
        particles.forces += external_forces
    prev_positions = particles.positions.copy() if scene_at_t is not None else None
    integrate_step(particles, params)
    if scene_at_t is not None:
        scene_at_t.resolve_contacts(particles, params.timestep, prev_positions)
        bounds = getattr(scene_at_t, "bounds", None)
        if bounds is not None:
            lo, hi = bounds
            outside = np.any(particles.positions < lo, axis=1)
            outside |= np.any(particles.positions > hi, axis=1)
            info.escaped = int(outside.sum())
            if info.escaped:
                log.warning("%d particles outside scene bounds", info.escaped)
    return info
