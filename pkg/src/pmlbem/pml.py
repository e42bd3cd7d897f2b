"""Complex coordinate stretching and the stretched free-space kernel.

The absorbing layer is realized by continuing each Cartesian coordinate
into the complex plane,

    x_l -> x_l + i * int_0^{x_l} sigma_l(t) dt,

where the absorption profile sigma_l vanishes on the physical box
|x_l| <= a_l, ramps up polynomially across a layer of thickness T_l and
saturates at the constant strength S beyond it.  This module provides the
profile, stretched coordinates, the diagonal stretch Jacobians (alpha, B,
J, A) and the stretched Helmholtz kernel

    exp(i k rho) / (4 pi rho),    rho = (sum_j (xt_j - yt_j)^2)^(1/2),

on the square-root branch with nonnegative real part, together with its
first and second derivatives with respect to the stretched coordinates.
All functions are pure and broadcast over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import SingularEvaluationError

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)

_FOUR_PI = 4.0 * np.pi


def _as_triple(value):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (3,))
    return (float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class PmlProfile:
    """Uniaxial absorber: onset half-widths ``a``, thicknesses, strength, ramp order.

    ``strength == 0`` disables the layer entirely (classical-reduction case).
    """

    a: tuple = (2.0, 2.0, 2.0)
    thickness: tuple = (4.0, 4.0, 4.0)
    strength: float = 6.0
    order: int = 6

    def __post_init__(self):
        object.__setattr__(self, "a", _as_triple(self.a))
        object.__setattr__(self, "thickness", _as_triple(self.thickness))
        object.__setattr__(self, "strength", float(self.strength))
        object.__setattr__(self, "order", int(self.order))
        if min(self.a) <= 0.0:
            raise ValueError("PML onset half-widths a_l must be positive")
        if min(self.thickness) <= 0.0:
            raise ValueError("PML thicknesses T_l must be positive")
        if self.strength < 0.0:
            raise ValueError("PML strength S must be nonnegative")
        if self.order < 2:
            raise ValueError("PML ramp order P must be an integer >= 2")

    @property
    def outer(self):
        """Half-widths a_l + T_l of the truncation box."""
        return tuple(a + t for a, t in zip(self.a, self.thickness))

    def sigma(self, axis, t):
        """Absorption sigma_l(t): even, zero for |t| <= a_l, S for |t| >= a_l+T_l."""
        a = self.a[axis]
        big_t = self.thickness[axis]
        s, p = self.strength, self.order
        t = np.abs(np.asarray(t, dtype=float))
        xbar = np.clip((t - (a + big_t)) / big_t, -1.0, 0.0)
        f1 = (0.5 - 1.0 / p) * xbar**3 + xbar / p + 0.5
        f2 = 1.0 - f1
        ramp = 2.0 * s * f1**p / (f1**p + f2**p)
        out = np.where(t <= a, 0.0, np.where(t >= a + big_t, s, ramp))
        return out if out.ndim else float(out)

    def sigma_antiderivative(self, axis, t):
        """int_0^t sigma_l(s) ds: odd, zero on the physical box, affine tail.

        The ramp portion [a_l, min(|t|, a_l+T_l)] is integrated with a fixed
        32-node Gauss-Legendre rule (the integrand is smooth, so this is
        spectrally accurate); beyond the ramp the exact affine tail is added.
        """
        a = self.a[axis]
        big_t = self.thickness[axis]
        t = np.asarray(t, dtype=float)
        sign = np.sign(t)
        u = np.abs(t)
        upper = np.minimum(u, a + big_t)
        half = np.maximum(upper - a, 0.0) / 2.0
        nodes = (a + half[..., None]) + half[..., None] * _GL_NODES
        ramp = half * (self.sigma(axis, nodes) @ _GL_WEIGHTS)
        tail = self.strength * np.maximum(u - (a + big_t), 0.0)
        out = sign * (ramp + tail)
        return out if out.ndim else float(out)

    @lru_cache(maxsize=None)
    def ramp_integral(self, axis):
        """Cached C_T = int_{a_l}^{a_l+T_l} sigma_l."""
        return float(self.sigma_antiderivative(axis, self.a[axis] + self.thickness[axis]))

    def stretch(self, x):
        """Map real points (..., 3) to stretched complex points (..., 3)."""
        x = np.asarray(x, dtype=float)
        out = x.astype(complex)
        for axis in range(3):
            out[..., axis] += 1j * self.sigma_antiderivative(axis, x[..., axis])
        return out

    def alpha(self, x):
        """Per-axis stretch factors alpha_l = 1 + i sigma_l(x_l), shape (..., 3)."""
        x = np.asarray(x, dtype=float)
        return np.stack(
            [1.0 + 1j * self.sigma(axis, x[..., axis]) for axis in range(3)], axis=-1
        )

    def jacobians(self, x):
        return StretchJacobians(self.alpha(x))

    def contains_physical(self, x):
        """True where the point lies in the closed physical box B_a."""
        x = np.asarray(x, dtype=float)
        inside = np.abs(x[..., 0]) <= self.a[0]
        for axis in (1, 2):
            inside = inside & (np.abs(x[..., axis]) <= self.a[axis])
        return inside

    def contains(self, x):
        """True where the point lies in the truncation box B_{a,T}."""
        x = np.asarray(x, dtype=float)
        inside = np.abs(x[..., 0]) <= self.outer[0]
        for axis in (1, 2):
            inside = inside & (np.abs(x[..., axis]) <= self.outer[axis])
        return inside


@dataclass(frozen=True)
class StretchJacobians:
    """Diagonal Jacobians of the stretch: alpha, B = diag(alpha), J = prod(alpha),
    A = J^{-1} B^2.  Only the alpha entries are stored; everything else is derived."""

    alpha: np.ndarray

    @property
    def jacobian(self):
        a = self.alpha
        return a[..., 0] * a[..., 1] * a[..., 2]

    @property
    def b_diag(self):
        return self.alpha

    @property
    def a_diag(self):
        return self.alpha**2 / self.jacobian[..., None]

    def b_matrix(self):
        return np.apply_along_axis(np.diag, -1, self.alpha)

    def a_matrix(self):
        return np.apply_along_axis(np.diag, -1, self.a_diag)


def sqrt_nonneg_real(z):
    """Square root on the branch with Re >= 0 and arg in (-pi/2, pi/2].

    The boundary case Re = 0 takes the root with nonnegative imaginary part
    (arg = +pi/2), matching the branch convention of the complex distance.
    """
    w = np.sqrt(np.asarray(z, dtype=complex))
    flip = (w.real < 0.0) | ((w.real == 0.0) & (w.imag < 0.0))
    return np.where(flip, -w, w)


def complex_distance_from_diff(d):
    """rho for a difference vector d = xt - yt of stretched points, no zero check."""
    return sqrt_nonneg_real((d * d).sum(axis=-1))


def complex_distance(xt, yt):
    """Complex distance rho(xt, yt) between stretched points.

    Raises
    ------
    SingularEvaluationError
        If any pair of underlying points coincides exactly.
    """
    d = np.asarray(xt, dtype=complex) - np.asarray(yt, dtype=complex)
    rho = complex_distance_from_diff(d)
    if np.any(rho == 0.0):
        raise SingularEvaluationError("complex distance requested at coincident points")
    return rho if np.ndim(rho) else complex(rho)


def kernel_factors(k, rho):
    """Scalar factors of the Helmholtz kernel at (complex or real) distance rho.

    Returns (phi, g) with phi = exp(ik rho)/(4 pi rho) and g such that the
    gradient with respect to the stretched target coordinate is g * (xt - yt).
    """
    ikr = 1j * k * rho
    phi = np.exp(ikr) / (_FOUR_PI * rho)
    g = (ikr - 1.0) * phi / (rho * rho)
    return phi, g


def kernel_factors_hess(k, rho):
    """(phi, g, gp): additionally the factor gp of the dyadic part of the Hessian,

        d^2 phi / dxt_i dxt_j = delta_ij g + (xt_i - yt_i)(xt_j - yt_j) gp.
    """
    ikr = 1j * k * rho
    phi = np.exp(ikr) / (_FOUR_PI * rho)
    rho2 = rho * rho
    g = (ikr - 1.0) * phi / rho2
    gp = (3.0 - 3.0 * ikr - (k * k) * rho2) * phi / (rho2 * rho2)
    return phi, g, gp


def stretched_green(k, x, y, profile):
    """Stretched kernel value and gradient (w.r.t. stretched target coordinates).

    ``k = 0`` yields the stretched Laplace kernel.  Accepts broadcastable
    (..., 3) real points; raises on coincident points.
    """
    xt = profile.stretch(x)
    yt = profile.stretch(y)
    d = xt - yt
    rho = complex_distance_from_diff(d)
    if np.any(rho == 0.0):
        raise SingularEvaluationError("stretched kernel evaluated at x == y")
    phi, g = kernel_factors(k, rho)
    return phi, g[..., None] * d
