"""Smoothing kernels for the particle solver.

Density sums use the sixth-degree polynomial bump kernel, pressure
gradients use the spiky kernel, and the viscosity term uses the kernel
whose Laplacian is non-negative inside the support. All three vanish at
and beyond the support radius h, and the density kernel integrates to 1
over its 3D support.
"""

from __future__ import annotations

import numpy as np

__all__ = ["KernelSet"]


class KernelSet:
    """Kernel evaluations for a fixed support radius h (meters)."""

    def __init__(self, h: float):
        if h <= 0.0:
            raise ValueError(f"kernel radius must be positive, got {h}")
        self.h = float(h)
        self.h2 = self.h * self.h
        self._c_poly6 = 315.0 / (64.0 * np.pi * self.h**9)
        self._c_spiky = 45.0 / (np.pi * self.h**6)
        self._c_visc = 45.0 / (np.pi * self.h**6)

    def w(self, dist):
        """Density kernel W(d, h); zero for d >= h, non-negative everywhere."""
        d = np.asarray(dist, dtype=np.float64)
        q = self.h2 - d * d
        return np.where((d >= 0.0) & (d < self.h), self._c_poly6 * q * q * q, 0.0)

    @property
    def w0(self) -> float:
        """Kernel value at zero distance (the self contribution)."""
        return self._c_poly6 * self.h2**3

    def grad_w(self, disp, dist=None):
        """Spiky kernel gradient at displacement disp = r_i - r_j.

        This is the gradient with respect to r_i; it points from i toward
        j (downhill in distance) and is defined as zero at the origin.
        """
        disp = np.asarray(disp, dtype=np.float64)
        if dist is None:
            dist = np.linalg.norm(disp, axis=-1)
        d = np.asarray(dist, dtype=np.float64)
        inside = (d > 0.0) & (d < self.h)
        dd = np.where(inside, d, 1.0)
        coef = np.where(inside, -self._c_spiky * (self.h - d) ** 2 / dd, 0.0)
        return disp * coef[..., None]

    def lap_w(self, dist):
        """Viscosity kernel Laplacian; non-negative, zero for d >= h."""
        d = np.asarray(dist, dtype=np.float64)
        return np.where((d >= 0.0) & (d < self.h), self._c_visc * (self.h - d), 0.0)
