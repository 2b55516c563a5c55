"""Particle state arrays and fluid parameters.

State is stored struct-of-arrays: one (N, 3) or (N,) float64 array per
physical quantity, plus a stable integer id per particle. Units are MKS
throughout (meters, kilograms, seconds).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = ["FluidParams", "ParticleSet", "ValidationError"]

CFL_EPS = 1e-9


class ValidationError(ValueError):
    """Raised when a configuration violates a load-time constraint."""


@dataclass
class FluidParams:
    """Physical constants of the simulated liquid.

    The force terms divide by density twice and the velocity update
    divides once more, so `rest_density` sets the overall stiffness
    scale of the solver, not just an offset: at the default of 1.0 the
    pressure term carries standard weakly-compressible stiffness with
    `sound_speed` acting as the true acoustic speed. All constants here
    are calibration targets, not tabulated material properties.

    `viscosity_form` selects between the summed-velocity viscosity term
    ("paper", the default) and the relative-velocity variant
    ("difference"). `integrator` selects "symplectic" (position update
    uses the freshly updated velocity) or "paper" (position update uses
    the pre-update velocity).
    """

    particle_mass: float
    rest_density: float = 1.0
    viscosity: float = 2.0e-4
    tension: float = 1.0e-5
    sound_speed: float = 2.6
    kernel_radius: float = 0.011
    timestep: float = 1.0 / 300.0
    gravity: tuple = (0.0, 0.0, -9.81)
    normal_threshold: float | None = None
    cfl_factor: float = 0.8
    integrator: str = "symplectic"
    viscosity_form: str = "paper"
    negative_pressure: str = "clamped"
    # Density entering force denominators is floored at this fraction of the
    # rest density; the raw 1/rho powers diverge for sparse spray particles.
    density_floor_factor: float = 0.8

    def __post_init__(self):
        self.gravity = tuple(float(g) for g in self.gravity)
        if self.normal_threshold is None:
            self.normal_threshold = 0.3 / self.kernel_radius
        self.validate()

    def validate(self):
        positive = {
            "particle_mass": self.particle_mass,
            "rest_density": self.rest_density,
            "sound_speed": self.sound_speed,
            "kernel_radius": self.kernel_radius,
            "timestep": self.timestep,
            "cfl_factor": self.cfl_factor,
            "normal_threshold": self.normal_threshold,
        }
        for name, value in positive.items():
            if not value > 0.0:
                raise ValidationError(f"{name} must be strictly positive, got {value}")
        for name, value in (("viscosity", self.viscosity), ("tension", self.tension)):
            if value < 0.0:
                raise ValidationError(f"{name} must be non-negative, got {value}")
        bound = self.cfl_factor * self.kernel_radius / self.sound_speed
        if self.timestep > bound + CFL_EPS:
            raise ValidationError(
                f"timestep {self.timestep:.6g} exceeds CFL bound "
                f"{bound:.6g} (= cfl_factor * h / c)"
            )
        if self.integrator not in ("symplectic", "paper"):
            raise ValidationError(f"unknown integrator {self.integrator!r}")
        if self.viscosity_form not in ("paper", "difference"):
            raise ValidationError(f"unknown viscosity form {self.viscosity_form!r}")
        if self.negative_pressure not in ("clamped", "as_is"):
            raise ValidationError(f"unknown negative pressure mode {self.negative_pressure!r}")
        if not 0.0 <= self.density_floor_factor <= 1.0:
            raise ValidationError(
                f"density floor factor must be within [0, 1], got {self.density_floor_factor}"
            )

    @property
    def spacing(self) -> float:
        """Rest lattice spacing implied by mass and rest density."""
        return float((self.particle_mass / self.rest_density) ** (1.0 / 3.0))

    @classmethod
    def for_spacing(cls, spacing: float, **overrides) -> "FluidParams":
        """Consistent defaults for a target rest spacing.

        The kernel radius is 2.2 spacings and the sound speed sits just
        inside the CFL bound for the default timestep.
        """
        rest_density = overrides.pop("rest_density", 1.0)
        mass = rest_density * spacing**3
        h = overrides.pop("kernel_radius", 2.2 * spacing)
        timestep = overrides.get("timestep", cls.timestep)
        cfl = overrides.get("cfl_factor", cls.cfl_factor)
        c = overrides.pop("sound_speed", 0.999 * cfl * h / timestep)
        return cls(
            particle_mass=mass,
            rest_density=rest_density,
            kernel_radius=h,
            sound_speed=c,
            **overrides,
        )

    def scaled(self, **scales) -> "FluidParams":
        """Copy with named fields multiplied by the given factors."""
        changes = {name: getattr(self, name) * factor for name, factor in scales.items()}
        return replace(self, normal_threshold=self.normal_threshold, **changes)

    def to_dict(self) -> dict:
        return {
            "particle_mass": self.particle_mass,
            "rest_density": self.rest_density,
            "viscosity": self.viscosity,
            "tension": self.tension,
            "sound_speed": self.sound_speed,
            "kernel_radius": self.kernel_radius,
            "timestep": self.timestep,
            "gravity": list(self.gravity),
            "normal_threshold": self.normal_threshold,
            "cfl_factor": self.cfl_factor,
            "integrator": self.integrator,
            "viscosity_form": self.viscosity_form,
            "negative_pressure": self.negative_pressure,
            "density_floor_factor": self.density_floor_factor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FluidParams":
        data = dict(data)
        if "gravity" in data:
            data["gravity"] = tuple(data["gravity"])
        return cls(**data)


@dataclass
class ParticleSet:
    """Struct-of-arrays particle state."""

    positions: np.ndarray
    velocities: np.ndarray
    forces: np.ndarray
    densities: np.ndarray
    pressures: np.ndarray
    ids: np.ndarray

    @classmethod
    def from_positions(cls, positions, velocities=None, ids=None) -> "ParticleSet":
        positions = np.ascontiguousarray(positions, dtype=np.float64)
        n = positions.shape[0]
        if velocities is None:
            velocities = np.zeros((n, 3))
        else:
            velocities = np.ascontiguousarray(velocities, dtype=np.float64)
        if ids is None:
            ids = np.arange(n, dtype=np.uint32)
        else:
            ids = np.ascontiguousarray(ids, dtype=np.uint32)
        return cls(
            positions=positions,
            velocities=velocities,
            forces=np.zeros((n, 3)),
            densities=np.zeros(n),
            pressures=np.zeros(n),
            ids=ids,
        )

    @classmethod
    def empty(cls) -> "ParticleSet":
        return cls.from_positions(np.empty((0, 3)))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "ParticleSet":
        return ParticleSet(
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            forces=self.forces.copy(),
            densities=self.densities.copy(),
            pressures=self.pressures.copy(),
            ids=self.ids.copy(),
        )
