"""Park transformation and the macro/micro compression operators.

The compression Q maps the micro-state to macro coordinates: identity on the
slow block, block-diagonal Park rotation on every three-phase group of the
fast block.  R is its exact inverse.  In the rotated frame the synchronous
60 Hz carrier of the network waveforms becomes a near-constant offset, which
is what lets the kernel averaging see the slow drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "park_matrix",
    "park_inverse",
    "PARK_ROTATION",
    "ParkAngles",
    "compress",
    "reconstruct",
    "dq_rate",
]

TWO_THIRDS_PI = 2.0 * math.pi / 3.0

# d/dtheta coupling of [0, d, q] components under the rotating transform:
# the d row picks up +q, the q row picks up -d.
PARK_ROTATION = np.array([[0.0, 0.0, 0.0],
                          [0.0, 0.0, 1.0],
                          [0.0, -1.0, 0.0]])


def park_matrix(theta: float) -> np.ndarray:
    """2/3-scaled Park matrix mapping abc to [zero, d, q] at angle theta."""
    c0, c1, c2 = (math.cos(theta), math.cos(theta - TWO_THIRDS_PI),
                  math.cos(theta + TWO_THIRDS_PI))
    s0, s1, s2 = (math.sin(theta), math.sin(theta - TWO_THIRDS_PI),
                  math.sin(theta + TWO_THIRDS_PI))
    return (2.0 / 3.0) * np.array([[0.5, 0.5, 0.5],
                                   [c0, c1, c2],
                                   [-s0, -s1, -s2]])


def park_inverse(theta: float) -> np.ndarray:
    """Closed-form inverse of park_matrix(theta)."""
    c0, c1, c2 = (math.cos(theta), math.cos(theta - TWO_THIRDS_PI),
                  math.cos(theta + TWO_THIRDS_PI))
    s0, s1, s2 = (math.sin(theta), math.sin(theta - TWO_THIRDS_PI),
                  math.sin(theta + TWO_THIRDS_PI))
    return np.array([[1.0, c0, -s0],
                     [1.0, c1, -s1],
                     [1.0, c2, -s2]])


@dataclass(frozen=True)
class ParkAngles:
    """Rotation angles for the fast-block transform at one instant.

    theta applies to every three-phase group; when per_source is given, the
    terminal-current group of source k uses per_source[k] instead (local
    device frames).  rate is d(theta)/dt, needed when differentiating the
    rotated trajectory.  identity=True turns Q and R into plain copies,
    the degenerate configuration used for regression checks.
    """

    theta: float
    rate: float = 0.0
    per_source: tuple[float, ...] | None = None
    identity: bool = False


def _apply_blocks(vec_fast, layout, angles: ParkAngles, inverse: bool):
    out = np.empty_like(vec_fast)
    n_vw = 3 * (layout.n_bus + layout.n_edge)
    mk = park_inverse if inverse else park_matrix
    m = mk(angles.theta)
    blocks = vec_fast[:n_vw].reshape(-1, 3)
    out[:n_vw] = (blocks @ m.T).reshape(-1)
    if angles.per_source is None:
        icur = vec_fast[n_vw:].reshape(-1, 3)
        out[n_vw:] = (icur @ m.T).reshape(-1)
    else:
        for k in range(layout.n_src):
            mks = mk(angles.per_source[k])
            out[n_vw + 3 * k:n_vw + 3 * k + 3] = mks @ vec_fast[n_vw + 3 * k:n_vw + 3 * k + 3]
    return out


def compress(x, layout, angles: ParkAngles) -> np.ndarray:
    """The Q operator: macro coordinates u with the fast block rotated to 0dq."""
    x = np.asarray(x, dtype=float)
    if angles.identity:
        return x.copy()
    u = np.empty_like(x)
    u[:layout.slow_dim] = x[:layout.slow_dim]
    u[layout.slow_dim:] = _apply_blocks(x[layout.slow_dim:], layout, angles, inverse=False)
    return u


def reconstruct(u, layout, angles: ParkAngles) -> np.ndarray:
    """The R operator, exact inverse of compress at the same angles."""
    u = np.asarray(u, dtype=float)
    if angles.identity:
        return u.copy()
    x = np.empty_like(u)
    x[:layout.slow_dim] = u[:layout.slow_dim]
    x[layout.slow_dim:] = _apply_blocks(u[layout.slow_dim:], layout, angles, inverse=True)
    return x


def dq_rate(x, xdot, layout, angles: ParkAngles) -> np.ndarray:
    """Time derivative of Q(x(t)) given x and dx/dt at the same instant.

    d/dt (P x) = P xdot + rate * W (P x) blockwise on the fast block; the
    slow block passes through.  Used for equilibrium detection, where the
    rotating carrier must not count as motion.
    """
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if angles.identity:
        return xdot.copy()
    du = np.empty_like(x)
    du[:layout.slow_dim] = xdot[:layout.slow_dim]
    du[layout.slow_dim:] = _apply_blocks(xdot[layout.slow_dim:], layout, angles, inverse=False)
    u_fast = _apply_blocks(x[layout.slow_dim:], layout, angles, inverse=False)
    rot = (u_fast.reshape(-1, 3) @ PARK_ROTATION.T).reshape(-1)
    if angles.per_source is None:
        du[layout.slow_dim:] += angles.rate * rot
    else:
        n_vw = 3 * (layout.n_bus + layout.n_edge)
        du[layout.slow_dim:layout.slow_dim + n_vw] += angles.rate * rot[:n_vw]
        # local frames rotate at their own device rate; callers supply equal
        # rates in practice, so reuse the global rate for the current blocks
        du[layout.slow_dim + n_vw:] += angles.rate * rot[n_vw:]
    return du
