"""Incident and auxiliary source fields.

Plane-wave and dipole incidence, the planar-layered reference solution built
from recursive generalized reflection/transmission coefficients, and the
construction of the boundary-data traces for the BIEs.  All field evaluators
accept stretched (complex) evaluation points; the incidence has no x1
dependence (wavevector (0, k_y, -k_z), k_z > 0), so the planar solution
separates into an E-polarized part driven by E_{x1} and an H-polarized part
driven by H_{x1}:

    H2 = -(i/w mu) d3 E1,   H3 = (i/w mu) d2 E1,
    E2 =  (i/w eps) d3 H1,  E3 = -(i/w eps) d2 H1.

Interface heights are coordinates z_1 > z_2 > ...; the recursion phases use
the depths d_j = -z_j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateIncidenceError, ValidationError
from .pml import kernel_factors, kernel_factors_hess, complex_distance_from_diff


@dataclass(frozen=True)
class MediumSpec:
    """Per-layer permittivity/permeability and the angular frequency."""

    eps: tuple
    mu: tuple
    omega: float

    def __post_init__(self):
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        object.__setattr__(self, "omega", float(self.omega))
        if len(self.eps) != len(self.mu):
            raise ValidationError("media: eps and mu lists differ in length")
        if len(self.eps) < 2:
            raise ValidationError("media: at least two layers required")
        if min(self.eps) <= 0 or min(self.mu) <= 0 or self.omega <= 0:
            raise ValidationError("media: eps, mu and omega must be positive")

    @property
    def n_layers(self):
        return len(self.eps)

    def wavenumber(self, j):
        """k_j = omega sqrt(mu_j eps_j); layers are 1-based."""
        return self.omega * np.sqrt(self.mu[j - 1] * self.eps[j - 1])

    @property
    def wavelength(self):
        return 2.0 * np.pi / self.wavenumber(1)


@dataclass(frozen=True)
class PlaneWaveSpec:
    """Plane wave E = (p x k) e^{i k.x} with k = (0, k_y, -k_z), k_z > 0;
    the wavevector is rescaled to |k| = k_1 at construction."""

    polarization: tuple
    k_y: float
    k_z: float

    def __post_init__(self):
        object.__setattr__(self, "polarization",
                           tuple(float(c) for c in self.polarization))
        if self.k_z <= 0:
            raise ValidationError("incidence: k_z must be positive (downgoing wave)")

    def normalized(self, k1):
        scale = k1 / np.hypot(self.k_y, self.k_z)
        return PlaneWaveSpec(self.polarization, self.k_y * scale, self.k_z * scale)

    @property
    def wavevector(self):
        return np.array([0.0, self.k_y, -self.k_z])


@dataclass(frozen=True)
class DipoleSpec:
    """Point dipole at ``location`` (inside the physical box) with moment ``moment``."""

    location: tuple
    moment: tuple

    def __post_init__(self):
        object.__setattr__(self, "location", tuple(float(c) for c in self.location))
        object.__setattr__(self, "moment", tuple(float(c) for c in self.moment))


class LayeredStack:
    """Flat reference stack: media plus interface heights z_1 > ... > z_{N-1}."""

    def __init__(self, media: MediumSpec, heights):
        heights = tuple(float(h) for h in heights)
        if len(heights) != media.n_layers - 1:
            raise ValidationError("interfaces: need exactly N-1 interface heights")
        if any(a <= b for a, b in zip(heights, heights[1:])):
            raise ValidationError("interfaces: heights must be strictly decreasing")
        self.media = media
        self.heights = heights

    @property
    def n_layers(self):
        return self.media.n_layers

    @property
    def depths(self):
        return tuple(-z for z in self.heights)

    def propagation_constants(self, k_y):
        """k_{j,x3} = sqrt(k_j^2 - k_y^2) with Im >= 0, per layer (1-based list)."""
        out = []
        for j in range(1, self.n_layers + 1):
            kj = self.media.wavenumber(j)
            kz = np.sqrt(complex(kj * kj - k_y * k_y))
            if kz.imag < 0:
                kz = -kz
            out.append(kz)
        return out

    def layer_of(self, x3):
        """1-based layer index; the layer above owns its lower boundary plane."""
        x3 = np.asarray(x3, dtype=float)
        count = np.zeros(x3.shape, dtype=int)
        for z in self.heights:
            count += x3 < z
        out = count + 1
        return out if out.ndim else int(out)


# ---------------------------------------------------------------------------
# Elementary sources
# ---------------------------------------------------------------------------


def plane_wave_fields(spec: PlaneWaveSpec, media: MediumSpec, points):
    """(E, H) of the incident plane wave at (possibly complex) points (..., 3)."""
    k = spec.wavevector
    p = np.asarray(spec.polarization, dtype=float)
    pts = np.asarray(points, dtype=complex)
    phase = np.exp(1j * (pts @ k))
    e_amp = np.cross(p, k)
    e = e_amp * phase[..., None]
    h = np.cross(k, e) / (media.omega * media.mu[0])
    return e, h


def dipole_fields(spec: DipoleSpec, media: MediumSpec, points):
    """(E, H) of the dipole source at (possibly complex) points.

    E = i w mu_1 curl curl (phi p) as printed; H is scaled so the pair solves
    the layer-1 Maxwell system: H = (1/(i w mu_1)) curl E = k_1^2 grad(phi) x p.
    """
    k1 = media.wavenumber(1)
    p = np.asarray(spec.moment, dtype=float)
    z = np.asarray(spec.location, dtype=float)
    dx = np.asarray(points, dtype=complex) - z
    rho = complex_distance_from_diff(dx)
    phi, g, gp = kernel_factors_hess(k1, rho)
    curlcurl = (k1 * k1 * phi + g)[..., None] * p + (gp * (dx @ p))[..., None] * dx
    e = 1j * media.omega * media.mu[0] * curlcurl
    h = (k1 * k1) * np.cross(g[..., None] * dx, p)
    return e, h


def manufactured_dipole_fields(spec: DipoleSpec, media: MediumSpec, points):
    """Maxwell pair with E = curl curl (phi p) (interior manufactured solution)."""
    e, h = dipole_fields(spec, media, points)
    scale = 1.0 / (1j * media.omega * media.mu[0])
    return scale * e, scale * h


# ---------------------------------------------------------------------------
# Planar-layered reference solution
# ---------------------------------------------------------------------------


def fresnel_coefficients(stack: LayeredStack, j, k_y):
    """(R_TE, R_TM, T_TE, T_TM) of interface j (between layers j and j+1)."""
    kz = stack.propagation_constants(k_y)
    mu = stack.media.mu
    eps = stack.media.eps
    return _fresnel_pair(mu[j - 1], mu[j], eps[j - 1], eps[j], kz[j - 1], kz[j])


def _fresnel_pair(mu_a, mu_b, eps_a, eps_b, kz_a, kz_b):
    den_te = mu_b * kz_a + mu_a * kz_b
    den_tm = eps_b * kz_a + eps_a * kz_b
    scale = max(abs(den_te), abs(den_tm))
    if min(abs(den_te), abs(den_tm)) < 1e-14 * max(scale, 1.0):
        raise DegenerateIncidenceError("vanishing Fresnel denominator")
    r_te = (mu_b * kz_a - mu_a * kz_b) / den_te
    r_tm = (eps_b * kz_a - eps_a * kz_b) / den_tm
    t_te = 2.0 * mu_b * kz_a / den_te
    t_tm = 2.0 * eps_b * kz_a / den_tm
    return r_te, r_tm, t_te, t_tm


def generalized_reflection(stack: LayeredStack, k_y):
    """Backward recursion for the stack reflection coefficients and forward
    recursion for the per-layer amplitudes.

    Returns dict with 1-based-indexable lists (index 0 unused):
      ``r_te``/``r_tm``: R~_{j,j+1} for j = 1..N (entry N is 0),
      ``a_te``/``a_tm``: A_j for j = 1..N.
    """
    n = stack.n_layers
    kz = stack.propagation_constants(k_y)
    d = (None,) + stack.depths  # d[j], j = 1..N-1
    mu, eps = stack.media.mu, stack.media.eps

    r_te = [0j] * (n + 1)
    r_tm = [0j] * (n + 1)
    for j in range(n - 1, 0, -1):
        f_te, f_tm, t_te, t_tm = _fresnel_pair(
            mu[j - 1], mu[j], eps[j - 1], eps[j], kz[j - 1], kz[j]
        )
        b_te, b_tm, tb_te, tb_tm = _fresnel_pair(
            mu[j], mu[j - 1], eps[j], eps[j - 1], kz[j], kz[j - 1]
        )
        if j == n - 1:
            phase = 0.0
        else:
            phase = np.exp(2j * kz[j] * (d[j + 1] - d[j]))
        den_te = 1.0 - b_te * r_te[j + 1] * phase
        den_tm = 1.0 - b_tm * r_tm[j + 1] * phase
        if min(abs(den_te), abs(den_tm)) < 1e-14:
            raise DegenerateIncidenceError("resonant denominator in the recursion")
        r_te[j] = f_te + tb_te * r_te[j + 1] * t_te * phase / den_te
        r_tm[j] = f_tm + tb_tm * r_tm[j + 1] * t_tm * phase / den_tm

    a_te = [0j] * (n + 1)
    a_tm = [0j] * (n + 1)
    a_te[1] = 1.0 + 0j
    a_tm[1] = 1.0 + 0j
    for j in range(2, n + 1):
        f_te, f_tm, t_te, t_tm = _fresnel_pair(
            mu[j - 2], mu[j - 1], eps[j - 2], eps[j - 1], kz[j - 2], kz[j - 1]
        )
        b_te, b_tm, _, _ = _fresnel_pair(
            mu[j - 1], mu[j - 2], eps[j - 1], eps[j - 2], kz[j - 1], kz[j - 2]
        )
        if j <= n - 1:
            phase = np.exp(2j * kz[j - 1] * (d[j] - d[j - 1]))
        else:
            phase = 0.0
        den_te = 1.0 - b_te * r_te[j] * phase
        den_tm = 1.0 - b_tm * r_tm[j] * phase
        if min(abs(den_te), abs(den_tm)) < 1e-14:
            raise DegenerateIncidenceError("resonant denominator in the recursion")
        shift = np.exp(1j * (kz[j - 2] - kz[j - 1]) * d[j - 1])
        a_te[j] = t_te * a_te[j - 1] * shift / den_te
        a_tm[j] = t_tm * a_tm[j - 1] * shift / den_tm

    return {"r_te": r_te, "r_tm": r_tm, "a_te": a_te, "a_tm": a_tm}


def _x1_profiles(stack, pw, recursion, layer):
    """Scale factors for the x1 components: returns callables F(x3) and F'(x3)
    for both polarizations in the given layer."""
    kz = stack.propagation_constants(pw.k_y)[layer - 1]
    d = (None,) + stack.depths
    n = stack.n_layers

    def make(rt, amp):
        r = rt[layer]
        dj = d[layer] if layer <= n - 1 else 0.0

        def f(x3):
            up = r * np.exp(1j * kz * (x3 + 2.0 * dj)) if r != 0 else 0.0
            return amp * (np.exp(-1j * kz * x3) + up)

        def fp(x3):
            up = r * 1j * kz * np.exp(1j * kz * (x3 + 2.0 * dj)) if r != 0 else 0.0
            return amp * (-1j * kz * np.exp(-1j * kz * x3) + up)

        return f, fp

    a_te = 1.0 if layer == 1 else recursion["a_te"][layer]
    a_tm = 1.0 if layer == 1 else recursion["a_tm"][layer]
    f_te, fp_te = make(recursion["r_te"], a_te)
    f_tm, fp_tm = make(recursion["r_tm"], a_tm)
    return f_te, fp_te, f_tm, fp_tm


def planar_reference_fields(stack: LayeredStack, pw: PlaneWaveSpec, points,
                            layer=None, recursion=None):
    """Total (E, H) of the plane wave scattered by the flat reference stack.

    ``points`` may be complex (stretched); if ``layer`` is None it is assigned
    per point from the real part of x3 (layer above owns its lower plane).
    """
    media = stack.media
    pw = pw.normalized(media.wavenumber(1))
    if recursion is None:
        recursion = generalized_reflection(stack, pw.k_y)
    pts = np.asarray(points, dtype=complex)
    flat = pts.reshape(-1, 3)
    e = np.zeros((flat.shape[0], 3), dtype=complex)
    h = np.zeros((flat.shape[0], 3), dtype=complex)
    if layer is None:
        layers = stack.layer_of(flat[:, 2].real)
        layers = np.atleast_1d(layers)
    else:
        layers = np.full(flat.shape[0], layer, dtype=int)

    p = np.asarray(pw.polarization, dtype=float)
    k1 = media.wavenumber(1)
    e0 = -p[2] * pw.k_y - p[1] * pw.k_z
    h0 = (k1 * k1) / (media.omega * media.mu[0]) * p[0]
    omega = media.omega

    for j in np.unique(layers):
        sel = layers == j
        x2 = flat[sel, 1]
        x3 = flat[sel, 2]
        f_te, fp_te, f_tm, fp_tm = _x1_profiles(stack, pw, recursion, int(j))
        lat = np.exp(1j * pw.k_y * x2)
        e1 = e0 * lat * f_te(x3)
        de1 = e0 * lat * fp_te(x3)
        h1 = h0 * lat * f_tm(x3)
        dh1 = h0 * lat * fp_tm(x3)
        mu_j = media.mu[j - 1]
        eps_j = media.eps[j - 1]
        iky = 1j * pw.k_y
        e[sel, 0] = e1
        e[sel, 1] = (1j / (omega * eps_j)) * dh1
        e[sel, 2] = -(1j / (omega * eps_j)) * iky * h1
        h[sel, 0] = h1
        h[sel, 1] = -(1j / (omega * mu_j)) * de1
        h[sel, 2] = (1j / (omega * mu_j)) * iky * e1
    return e.reshape(pts.shape), h.reshape(pts.shape)


_PERFECT_REFLECTION = {"pec": (-1.0, 1.0), "pmc": (1.0, -1.0)}


def half_space_reference_fields(stack: LayeredStack, pw: PlaneWaveSpec, points,
                                condition="pec"):
    """Plane wave over a perfectly conducting ground plane at z_1 (layer-1
    total field; zero below)."""
    r_te, r_tm = _PERFECT_REFLECTION[condition]
    n = stack.n_layers
    recursion = {
        "r_te": [0j] * (n + 1), "r_tm": [0j] * (n + 1),
        "a_te": [0j] * (n + 1), "a_tm": [0j] * (n + 1),
    }
    recursion["r_te"][1] = r_te
    recursion["r_tm"][1] = r_tm
    return planar_reference_fields(stack, pw, points, layer=1, recursion=recursion)


def source_fields(stack: LayeredStack, incidence, layer, points, condition=None):
    """Auxiliary source fields of one layer at (possibly complex) points.

    Plane-wave incidence: the planar reference field of that layer (with the
    perfect-conductor variant when ``condition`` is set).  Point source:
    the dipole field in layer 1 and zero below.
    """
    pts = np.asarray(points, dtype=complex)
    if isinstance(incidence, DipoleSpec):
        if layer == 1:
            return dipole_fields(incidence, stack.media, pts)
        zero = np.zeros(pts.shape, dtype=complex)
        return zero, zero.copy()
    if condition in ("pec", "pmc"):
        if layer == 1:
            return half_space_reference_fields(stack, incidence, pts, condition)
        zero = np.zeros(pts.shape, dtype=complex)
        return zero, zero.copy()
    return planar_reference_fields(stack, incidence, pts, layer=layer)


@dataclass
class BoundaryData:
    """Tangential traces per interface: interleaved components and ambient."""

    f_comps: list
    g_comps: list
    f_ambient: list
    g_ambient: list


def boundary_data(stack: LayeredStack, incidence, surfaces, profile):
    """Traces f_j = nu x (E~_j - E~_{j+1}), g_j = nu x (H~_j - H~_{j+1}) at the
    nodes of each interface surface, where E~(x) = B(x) E(x~)."""
    f_c, g_c, f_a, g_a = [], [], [], []
    for i, surf in enumerate(surfaces, start=1):
        xt = surf.nodes_stretched
        e_up, h_up = source_fields(stack, incidence, i, xt)
        e_dn, h_dn = source_fields(stack, incidence, i + 1, xt)
        b = surf.alpha
        f_amb = np.cross(surf.normals, b * (e_up - e_dn))
        g_amb = np.cross(surf.normals, b * (h_up - h_dn))
        f_a.append(f_amb)
        g_a.append(g_amb)
        f_c.append(surf.ambient_to_components(f_amb))
        g_c.append(surf.ambient_to_components(g_amb))
    return BoundaryData(f_c, g_c, f_a, g_a)


def stretched_trace(surface, fields):
    """nu x (B(x) F(x~)) for an ambient field sampled at the stretched nodes."""
    return np.cross(surface.normals, surface.alpha * fields)
