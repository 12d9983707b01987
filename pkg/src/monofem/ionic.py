"""Aliev-Panfilov reaction kinetics.

Cubic ionic current f and linear-in-recovery dynamics g,

    f(u, w) = A u (u - a)(u - 1) + u w,
    g(u, w) = eps (A u (u - 1 - a) + w),

their four partial derivatives, the model parameters, and the Gaussian
initial excitation used by the experiments.  All functions are pure and
accept numpy arrays.
"""

import numpy as np
from dataclasses import dataclass

__all__ = [
    "AlievPanfilovParams",
    "ReactionEval",
    "react",
    "initial_data",
    "lipschitz_constants",
]


@dataclass(frozen=True)
class AlievPanfilovParams:
    """Model constants: gain A > 0, threshold a in (0,1), recovery rate
    eps > 0, and the scalar conductivity used by the isotropic runs."""

    A: float = 8.0
    a: float = 0.15
    eps: float = 0.2
    M_scalar: float = 1.0

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError(f"A must be positive, got {self.A}")
        if not 0.0 < self.a < 1.0:
            raise ValueError(f"a must lie in (0, 1), got {self.a}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.M_scalar > 0:
            raise ValueError(f"M_scalar must be positive, got {self.M_scalar}")

    @property
    def recovery_cap(self):
        """Upper bound A (1+a)^2 / 4 of the invariant region for w."""
        return self.A * (1.0 + self.a) ** 2 / 4.0


@dataclass(frozen=True)
class ReactionEval:
    """f, g and the four partials at one point (or arrays of points)."""

    f: np.ndarray
    g: np.ndarray
    f_u: np.ndarray
    f_w: np.ndarray
    g_u: np.ndarray
    g_w: np.ndarray


def f_value(u, w, p):
    return p.A * u * (u - p.a) * (u - 1.0) + u * w


def g_value(u, w, p):
    return p.eps * (p.A * u * (u - 1.0 - p.a) + w)


def f_du(u, w, p):
    return p.A * (3.0 * u * u - 2.0 * (1.0 + p.a) * u + p.a) + w


def f_dw(u, w, p):
    return u


def g_du(u, w, p):
    return p.eps * p.A * (2.0 * u - 1.0 - p.a)


def g_dw(u, w, p):
    return np.full_like(np.asarray(u, dtype=float), p.eps)


def react(u, w, p):
    """Evaluate f, g and their Jacobian entries at (u, w)."""
    u, w = np.broadcast_arrays(np.asarray(u, dtype=float),
                               np.asarray(w, dtype=float))
    return ReactionEval(
        f=f_value(u, w, p),
        g=g_value(u, w, p),
        f_u=f_du(u, w, p),
        f_w=u,
        g_u=g_du(u, w, p),
        g_w=g_dw(u, w, p),
    )


def initial_data(x, y):
    """Initial excitation: a Gaussian bump peaked at (1, 0) and zero
    recovery.

    u0 = exp(-((x-1)^2 + y^2) / 0.25), w0 = 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u0 = np.exp(-((x - 1.0) ** 2 + y ** 2) / 0.25)
    return u0, np.zeros_like(u0)


def lipschitz_constants(p, delta=0.1, resolution=400):
    """Max gradient norms of f and g over the a priori box
    [-delta, 1+delta] x [-delta, A(1+a)^2/4 + delta], sampled on a grid."""
    us = np.linspace(-delta, 1.0 + delta, resolution)
    ws = np.linspace(-delta, p.recovery_cap + delta, resolution)
    U, W = np.meshgrid(us, ws, indexing="ij")
    r = react(U, W, p)
    K_f = float(np.sqrt(r.f_u ** 2 + r.f_w ** 2).max())
    K_g = float(np.sqrt(r.g_u ** 2 + r.g_w ** 2).max())
    return K_f, K_g
