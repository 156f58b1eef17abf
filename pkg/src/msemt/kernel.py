"""Bump-kernel averaging of the compressed micro-trajectory.

The kernel K(t) = C exp(-D / (1 - t^2)) on (-1, 1), zero outside, is scaled
to a window of width eta as K_eta(t) = (2/eta) K(2t/eta).  Convolving the
kernel *derivative* with the trajectory u over the window equals convolving
the kernel with du/dt (integration by parts, both boundary terms vanish on
the compact support), which is how the macro-force is estimated without ever
forming the reduced vector field explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

__all__ = [
    "kernel_value",
    "kernel_derivative_value",
    "calibrate_C",
    "BumpKernel",
    "MacroForce",
    "estimate_macro_force",
]


def kernel_value(t: float, c: float, d: float) -> float:
    """C exp(-D/(1-t^2)) inside the unit support, zero outside."""
    if abs(t) >= 1.0:
        return 0.0
    return c * math.exp(-d / (1.0 - t * t))


def kernel_derivative_value(t: float, c: float, d: float) -> float:
    """Analytic derivative of kernel_value; also vanishes at the endpoints."""
    if abs(t) >= 1.0:
        return 0.0
    u = 1.0 - t * t
    return c * math.exp(-d / u) * (-2.0 * d * t / (u * u))


def calibrate_C(d: float, tol: float = 1.0e-10) -> float:
    """Amplitude making the unit-support kernel integrate to one."""
    if d <= 0.0:
        raise ValueError("shape parameter must be positive")
    integral, err = quad(lambda t: math.exp(-d / (1.0 - t * t)), -1.0, 1.0,
                         epsabs=tol, epsrel=tol)
    if not math.isfinite(integral) or integral <= 0.0 or err > 1e-6:
        raise ArithmeticError(f"kernel calibration quadrature failed (err={err:g})")
    return 1.0 / integral


@dataclass(frozen=True, eq=False)
class BumpKernel:
    """Calibrated symmetric bump kernel scaled to one averaging window."""

    c: float
    d: float
    eta: float
    n_grid: int = 129

    @classmethod
    def for_window(cls, eta: float, d: float = 1.25, c: float | None = None,
                   n_grid: int = 129) -> "BumpKernel":
        if n_grid < 17 or n_grid % 2 == 0:
            raise ValueError("dense grid needs an odd point count >= 17")
        return cls(c=calibrate_C(d) if c is None else c, d=d, eta=eta, n_grid=n_grid)

    def scaled(self, t: float) -> float:
        """K_eta(t) = (2/eta) K(2t/eta)."""
        return (2.0 / self.eta) * kernel_value(2.0 * t / self.eta, self.c, self.d)

    def scaled_derivative(self, t: float) -> float:
        """d/dt K_eta(t) = (2/eta)^2 K'(2t/eta)."""
        s = 2.0 / self.eta
        return s * s * kernel_derivative_value(s * t, self.c, self.d)

    def quadrature(self, t_n: float):
        """Simpson weights and derivative-kernel samples on the dense grid.

        Returns (tau, w) with w[i] = simpson_i * K'_eta(Delta - tau_i) and
        Delta = t_n + eta/2, so that a force estimate is just w @ u_samples.
        """
        tau = np.linspace(t_n, t_n + self.eta, self.n_grid)
        dt = self.eta / (self.n_grid - 1)
        w = np.ones(self.n_grid)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= dt / 3.0
        delta = t_n + 0.5 * self.eta
        kd = np.array([self.scaled_derivative(delta - t) for t in tau])
        return tau, w * kd

    def quadrature_value(self, t_n: float):
        """Like quadrature() but with K_eta itself: weights for a windowed mean."""
        tau = np.linspace(t_n, t_n + self.eta, self.n_grid)
        dt = self.eta / (self.n_grid - 1)
        w = np.ones(self.n_grid)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= dt / 3.0
        delta = t_n + 0.5 * self.eta
        kv = np.array([self.scaled(delta - t) for t in tau])
        return tau, w * kv


@dataclass(frozen=True, eq=False)
class MacroForce:
    """Kernel estimate of du/dt, evaluated at the window midpoint and
    assigned to the window end per the averaging convention."""

    values: np.ndarray
    t_assigned: float   # t_n + eta
    delta: float        # evaluation point t_n + eta/2
    window_id: int = -1


def estimate_macro_force(u_samples: np.ndarray, kern: BumpKernel, t_n: float,
                         window_id: int = -1) -> MacroForce:
    """Convolve K'_eta with the compressed trajectory over one window.

    u_samples rows must lie on the uniform dense grid spanning
    [t_n, t_n + eta]; composite Simpson does the quadrature.
    """
    u_samples = np.asarray(u_samples, dtype=float)
    if u_samples.shape[0] != kern.n_grid:
        raise ValueError(f"expected {kern.n_grid} dense samples, got {u_samples.shape[0]}")
    _, w = kern.quadrature(t_n)
    values = w @ u_samples
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite macro-force estimate")
    return MacroForce(values=values, t_assigned=t_n + kern.eta,
                      delta=t_n + 0.5 * kern.eta, window_id=window_id)
