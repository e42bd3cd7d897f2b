"""Parametric patch representation of truncated interfaces and obstacles.

Surfaces are non-overlapping logically-rectangular patches, each an analytic
chart [-1,1]^2 -> R^3 with first and second derivatives.  Discretization uses
tensor grids of Chebyshev points of the first kind with spectral
differentiation and Fejer quadrature weights.  The global normal convention:
nu is chosen so that x - h*nu lies on the upper/exterior side (the side of
layer j) for small h > 0; for a graph interface with the upper layer above,
nu points downward, and for obstacles nu points into the obstacle.

Surface differential operators use the contravariant representation
phi = phi1 * x_u + phi2 * x_v and

    div_G phi  = (1/sqrt|G|) { d_u(sqrt|G| phi1) + d_v(sqrt|G| phi2) },
    curl_G u   = nu x grad_G u,

discretized spectrally on each patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateChartError,
    InvalidOrderError,
    ShapeMismatchError,
    UnsupportedGeometryError,
)
from .pml import PmlProfile


# ---------------------------------------------------------------------------
# Chebyshev grids
# ---------------------------------------------------------------------------


def cheb_nodes(order):
    """Chebyshev points of the first kind, u_i = cos((2i+1) pi / (2 N))."""
    if order < 2:
        raise InvalidOrderError(f"grid order must be >= 2, got {order}")
    i = np.arange(order)
    return np.cos((2 * i + 1) * np.pi / (2 * order))


class ChebyshevGrid:
    """1D Chebyshev (first kind) nodes with barycentric interpolation,
    spectral differentiation and Fejer quadrature weights."""

    def __init__(self, order):
        self.order = int(order)
        self.nodes = cheb_nodes(order)
        n = self.order
        theta = (2 * np.arange(n) + 1) * np.pi / (2 * n)
        self.bary = (-1.0) ** np.arange(n) * np.sin(theta)
        self.diff = self._diff_matrix()
        self.weights = self._fejer1()

    def _diff_matrix(self):
        x, w = self.nodes, self.bary
        dx = x[:, None] - x[None, :]
        np.fill_diagonal(dx, 1.0)
        d = (w[None, :] / w[:, None]) / dx
        np.fill_diagonal(d, 0.0)
        np.fill_diagonal(d, -d.sum(axis=1))
        return d

    def _fejer1(self):
        n = self.order
        theta = (2 * np.arange(n) + 1) * np.pi / (2 * n)
        m = np.arange(1, n // 2 + 1)
        corr = (np.cos(2 * np.outer(theta, m)) / (4 * m * m - 1.0)).sum(axis=1)
        return (2.0 / n) * (1.0 - 2.0 * corr)

    def interp_matrix(self, pts):
        """Barycentric interpolation matrix from nodal values to ``pts``."""
        pts = np.atleast_1d(np.asarray(pts, dtype=float))
        diff = pts[:, None] - self.nodes[None, :]
        exact = diff == 0.0
        diff = np.where(exact, 1.0, diff)
        mat = self.bary[None, :] / diff
        mat /= mat.sum(axis=1)[:, None]
        hit = exact.any(axis=1)
        if np.any(hit):
            mat[hit] = exact[hit].astype(float)
        return mat


# ---------------------------------------------------------------------------
# Charts
# ---------------------------------------------------------------------------


class Chart:
    """Analytic map [-1,1]^2 -> R^3 providing first and second derivatives."""

    def derivatives(self, u, v):
        """Return (x, xu, xv, xuu, xuv, xvv), each shaped like u with a
        trailing 3-axis."""
        raise NotImplementedError

    def evaluate(self, u, v):
        return self.derivatives(u, v)[0]


class AffineChart(Chart):
    """Flat rectangle: x(u, v) = origin + u * eu + v * ev."""

    def __init__(self, origin, eu, ev):
        self.origin = np.asarray(origin, dtype=float)
        self.eu = np.asarray(eu, dtype=float)
        self.ev = np.asarray(ev, dtype=float)

    def derivatives(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        shape = np.broadcast(u, v).shape
        x = self.origin + u[..., None] * self.eu + v[..., None] * self.ev
        xu = np.broadcast_to(self.eu, shape + (3,))
        xv = np.broadcast_to(self.ev, shape + (3,))
        zero = np.zeros(shape + (3,))
        return x, xu, xv, zero, zero, zero


class HeightField:
    """Scalar height eta(x1, x2) with gradient and Hessian (vectorized)."""

    def value(self, x1, x2):
        raise NotImplementedError

    def gradient(self, x1, x2):
        raise NotImplementedError

    def hessian(self, x1, x2):
        """Return (d11, d12, d22)."""
        raise NotImplementedError

    #: half-width of the support square (np.inf for global support)
    support = np.inf


class ZeroHeight(HeightField):
    support = 0.0

    def value(self, x1, x2):
        return np.zeros(np.broadcast(x1, x2).shape)

    def gradient(self, x1, x2):
        z = np.zeros(np.broadcast(x1, x2).shape)
        return z, z.copy()

    def hessian(self, x1, x2):
        z = np.zeros(np.broadcast(x1, x2).shape)
        return z, z.copy(), z.copy()


class CosineBump(HeightField):
    """amplitude * (cos(pi x1^2 / s^2) + 1)(cos(pi x2^2 / s^2) + 1) on |x_i| < s.

    C^1 across |x_i| = s; patch tilings place boundaries on +-s so each chart
    stays analytic.
    """

    def __init__(self, amplitude=0.25, support=1.0):
        self.amplitude = float(amplitude)
        self.support = float(support)

    def _g(self, x):
        t = np.pi * (x / self.support) ** 2
        inside = np.abs(x) < self.support
        g = np.where(inside, np.cos(np.where(inside, t, 0.0)) + 1.0, 0.0)
        c = 2.0 * np.pi / self.support**2
        gp = np.where(inside, -c * x * np.sin(np.where(inside, t, 0.0)), 0.0)
        gpp = np.where(
            inside,
            -c * np.sin(np.where(inside, t, 0.0))
            - (c * x) ** 2 * np.cos(np.where(inside, t, 0.0)),
            0.0,
        )
        return g, gp, gpp

    def value(self, x1, x2):
        g1, _, _ = self._g(np.asarray(x1, dtype=float))
        g2, _, _ = self._g(np.asarray(x2, dtype=float))
        return self.amplitude * g1 * g2

    def gradient(self, x1, x2):
        g1, gp1, _ = self._g(np.asarray(x1, dtype=float))
        g2, gp2, _ = self._g(np.asarray(x2, dtype=float))
        return self.amplitude * gp1 * g2, self.amplitude * g1 * gp2

    def hessian(self, x1, x2):
        g1, gp1, gpp1 = self._g(np.asarray(x1, dtype=float))
        g2, gp2, gpp2 = self._g(np.asarray(x2, dtype=float))
        a = self.amplitude
        return a * gpp1 * g2, a * gp1 * gp2, a * g1 * gpp2


class GaussianBump(HeightField):
    """amplitude * exp(-(x1^2 + x2^2) / width^2); analytic, rapidly decaying."""

    def __init__(self, amplitude=0.3, width=0.5):
        self.amplitude = float(amplitude)
        self.width = float(width)
        # effective support radius where the tail drops below 1e-12 relative
        self.support = self.width * np.sqrt(np.log(1e12))

    def value(self, x1, x2):
        r2 = (np.asarray(x1, dtype=float) ** 2 + np.asarray(x2, dtype=float) ** 2)
        return self.amplitude * np.exp(-r2 / self.width**2)

    def gradient(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        val = self.value(x1, x2)
        c = -2.0 / self.width**2
        return c * x1 * val, c * x2 * val

    def hessian(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        val = self.value(x1, x2)
        c = -2.0 / self.width**2
        return (
            (c + c * c * x1 * x1) * val,
            c * c * x1 * x2 * val,
            (c + c * c * x2 * x2) * val,
        )


class GraphChart(Chart):
    """Graph patch x3 = z0 + eta(x1, x2) over an axis-aligned rectangle."""

    def __init__(self, x_interval, y_interval, height=None, z0=0.0):
        self.cx = 0.5 * (x_interval[0] + x_interval[1])
        self.hx = 0.5 * (x_interval[1] - x_interval[0])
        self.cy = 0.5 * (y_interval[0] + y_interval[1])
        self.hy = 0.5 * (y_interval[1] - y_interval[0])
        self.height = height if height is not None else ZeroHeight()
        self.z0 = float(z0)

    def derivatives(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        x1 = self.cx + self.hx * u
        x2 = self.cy + self.hy * v
        x1, x2 = np.broadcast_arrays(x1, x2)
        eta = self.height.value(x1, x2)
        e1, e2 = self.height.gradient(x1, x2)
        e11, e12, e22 = self.height.hessian(x1, x2)
        shape = x1.shape
        zeros = np.zeros(shape)

        def vec(a, b, c):
            return np.stack([np.broadcast_to(a, shape), np.broadcast_to(b, shape), c], axis=-1)

        x = vec(x1, x2, self.z0 + eta)
        xu = vec(self.hx, zeros, self.hx * e1)
        xv = vec(zeros, self.hy, self.hy * e2)
        xuu = vec(zeros, zeros, self.hx**2 * e11)
        xuv = vec(zeros, zeros, self.hx * self.hy * e12)
        xvv = vec(zeros, zeros, self.hy**2 * e22)
        return x, xu, xv, xuu, xuv, xvv


class SphereFaceChart(Chart):
    """One cube-to-sphere face: x = center + r * R s / |s|, s = (u, v, 1)."""

    def __init__(self, center, radius, rotation):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.rotation = np.asarray(rotation, dtype=float)

    def derivatives(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        u, v = np.broadcast_arrays(u, v)
        shape = u.shape
        ones = np.ones(shape)
        zeros = np.zeros(shape)
        s = np.stack([u, v, ones], axis=-1)
        eu = np.stack([ones, zeros, zeros], axis=-1)
        ev = np.stack([zeros, ones, zeros], axis=-1)
        q2 = 1.0 + u * u + v * v
        f = q2 ** (-0.5)
        fu = -u * f**3
        fv = -v * f**3
        fuu = -(f**3) + 3.0 * u * u * f**5
        fvv = -(f**3) + 3.0 * v * v * f**5
        fuv = 3.0 * u * v * f**5

        n = s * f[..., None]
        nu_ = eu * f[..., None] + s * fu[..., None]
        nv_ = ev * f[..., None] + s * fv[..., None]
        nuu = 2.0 * eu * fu[..., None] + s * fuu[..., None]
        nvv = 2.0 * ev * fv[..., None] + s * fvv[..., None]
        nuv = eu * fv[..., None] + ev * fu[..., None] + s * fuv[..., None]

        rot = self.rotation

        def map_(w):
            return w @ rot.T

        r = self.radius
        x = self.center + r * map_(n)
        return (
            x,
            r * map_(nu_),
            r * map_(nv_),
            r * map_(nuu),
            r * map_(nuv),
            r * map_(nvv),
        )


class TorusChart(Chart):
    """Quarter of a torus: angles phi = phi0 + u*pi/2 ... (pi-extent blocks)."""

    def __init__(self, center, major, minor, phi_interval, theta_interval):
        self.center = np.asarray(center, dtype=float)
        self.major = float(major)
        self.minor = float(minor)
        self.cp = 0.5 * (phi_interval[0] + phi_interval[1])
        self.hp = 0.5 * (phi_interval[1] - phi_interval[0])
        self.ct = 0.5 * (theta_interval[0] + theta_interval[1])
        self.ht = 0.5 * (theta_interval[1] - theta_interval[0])

    def derivatives(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        u, v = np.broadcast_arrays(u, v)
        phi = self.cp + self.hp * u
        th = self.ct + self.ht * v
        R, r = self.major, self.minor
        w = R + r * np.cos(th)
        cp, sp = np.cos(phi), np.sin(phi)
        ct, st = np.cos(th), np.sin(th)

        x = self.center + np.stack([w * cp, w * sp, r * st], axis=-1)
        dphi = np.stack([-w * sp, w * cp, np.zeros_like(w)], axis=-1)
        dth = np.stack([-r * st * cp, -r * st * sp, r * ct], axis=-1)
        dpp = np.stack([-w * cp, -w * sp, np.zeros_like(w)], axis=-1)
        dtt = np.stack([-r * ct * cp, -r * ct * sp, -r * st], axis=-1)
        dpt = np.stack([r * st * sp, -r * st * cp, np.zeros_like(w)], axis=-1)

        return (
            x,
            self.hp * dphi,
            self.ht * dth,
            self.hp**2 * dpp,
            self.hp * self.ht * dpt,
            self.ht**2 * dtt,
        )


# ---------------------------------------------------------------------------
# Patches and surfaces
# ---------------------------------------------------------------------------


@dataclass
class MetricData:
    """Per-node differential geometry of one patch (flattened i-major)."""

    x: np.ndarray
    xu: np.ndarray
    xv: np.ndarray
    xuu: np.ndarray
    xuv: np.ndarray
    xvv: np.ndarray
    normal: np.ndarray
    sqrt_g: np.ndarray
    metric: np.ndarray
    metric_inv: np.ndarray
    pml_region: np.ndarray


def patch_metric(chart, u, v, orientation=1.0):
    """MetricData-style tuple at arbitrary parameter points (not flattened)."""
    x, xu, xv, xuu, xuv, xvv = chart.derivatives(u, v)
    cross = np.cross(xu, xv)
    sqrt_g = np.linalg.norm(cross, axis=-1)
    if np.any(sqrt_g < 1e-14):
        raise DegenerateChartError("chart tangents are (numerically) parallel")
    normal = orientation * cross / sqrt_g[..., None]
    g11 = (xu * xu).sum(-1)
    g12 = (xu * xv).sum(-1)
    g22 = (xv * xv).sum(-1)
    metric = np.stack(
        [np.stack([g11, g12], axis=-1), np.stack([g12, g22], axis=-1)], axis=-2
    )
    det = g11 * g22 - g12 * g12
    inv = (
        np.stack(
            [np.stack([g22, -g12], axis=-1), np.stack([-g12, g11], axis=-1)], axis=-2
        )
        / det[..., None, None]
    )
    return x, xu, xv, xuu, xuv, xvv, normal, sqrt_g, metric, inv


class Patch:
    """A chart bound to a Chebyshev tensor grid with precomputed node data.

    Nodes are flattened i-major: flat index = i * N + j for (u_i, v_j).
    """

    def __init__(self, chart, grid: ChebyshevGrid, profile: PmlProfile,
                 orientation=1.0, label=""):
        self.chart = chart
        self.grid = grid
        self.orientation = float(orientation)
        self.label = label
        n = grid.order
        uu, vv = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
        (x, xu, xv, xuu, xuv, xvv, normal, sqrt_g, metric, inv) = patch_metric(
            chart, uu, vv, self.orientation
        )
        flat = lambda a: a.reshape(-1, *a.shape[2:])
        pml_region = ~profile.contains_physical(x)
        self.metric_data = MetricData(
            flat(x), flat(xu), flat(xv), flat(xuu), flat(xuv), flat(xvv),
            flat(normal), flat(sqrt_g), flat(metric), flat(inv), flat(pml_region),
        )
        self.nodes = self.metric_data.x
        self.normals = self.metric_data.normal
        self.sqrt_g = self.metric_data.sqrt_g
        self.pml_region = self.metric_data.pml_region
        self.nodes_stretched = profile.stretch(self.nodes)
        self.alpha = profile.alpha(self.nodes)
        w2 = np.outer(grid.weights, grid.weights).ravel()
        self.weights = w2 * self.sqrt_g
        # characteristic (largest) node spacing, used for near-field thresholds
        d = self.nodes[:, None, :] - self.nodes[None, :, :]
        dist = np.linalg.norm(d, axis=-1)
        np.fill_diagonal(dist, np.inf)
        self.spacing = float(dist.min(axis=1).max())
        self.diameter = float(
            np.linalg.norm(self.nodes.max(axis=0) - self.nodes.min(axis=0))
        )

    @property
    def n_nodes(self):
        return self.grid.order**2

    def chart_data(self, pts):
        """Geometry at arbitrary parameter points (M, 2): same layout as nodes."""
        u = pts[:, 0]
        v = pts[:, 1]
        x, xu, xv, *_rest, normal, sqrt_g, _m, _mi = patch_metric(
            self.chart, u, v, self.orientation
        )
        return x, xu, xv, normal, sqrt_g

    def interpolation(self, pts):
        """Interpolation matrix (M, N^2) from nodal values to parameter points."""
        lu = self.grid.interp_matrix(pts[:, 0])
        lv = self.grid.interp_matrix(pts[:, 1])
        return np.einsum("mi,mj->mij", lu, lv).reshape(pts.shape[0], -1)


class Surface:
    """Ordered collection of patches with concatenated nodal arrays."""

    def __init__(self, patches):
        self.patches = list(patches)
        sizes = [p.n_nodes for p in self.patches]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_nodes = int(self.offsets[-1])
        self.nodes = np.concatenate([p.nodes for p in self.patches])
        self.normals = np.concatenate([p.normals for p in self.patches])
        self.nodes_stretched = np.concatenate([p.nodes_stretched for p in self.patches])
        self.alpha = np.concatenate([p.alpha for p in self.patches])
        self.weights = np.concatenate([p.weights for p in self.patches])
        self.xu = np.concatenate([p.metric_data.xu for p in self.patches])
        self.xv = np.concatenate([p.metric_data.xv for p in self.patches])
        self.metric_inv = np.concatenate([p.metric_data.metric_inv for p in self.patches])
        self.pml_region = np.concatenate([p.pml_region for p in self.patches])
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        self.diameter = float(np.linalg.norm(hi - lo))
        # 2x3 projection onto contravariant components at every node
        tan = np.stack([self.xu, self.xv], axis=1)
        self.comp_proj = np.einsum("nab,nbk->nak", self.metric_inv, tan)

    @property
    def n_dofs(self):
        return 2 * self.n_nodes

    def patch_slice(self, q):
        return slice(int(self.offsets[q]), int(self.offsets[q + 1]))

    def node_patch(self, idx):
        return int(np.searchsorted(self.offsets, idx, side="right") - 1)

    def components_to_ambient(self, comps):
        """(2M,) interleaved contravariant components -> (M, 3) ambient vectors."""
        if comps.shape[0] != self.n_dofs:
            raise ShapeMismatchError("component vector does not match surface dofs")
        c = comps.reshape(self.n_nodes, 2)
        return c[:, 0:1] * self.xu + c[:, 1:2] * self.xv

    def ambient_to_components(self, fields):
        """(M, 3) tangential ambient vectors -> (2M,) contravariant components."""
        if fields.shape[0] != self.n_nodes:
            raise ShapeMismatchError("field array does not match surface nodes")
        c = np.einsum("nak,nk->na", self.comp_proj, fields)
        return c.reshape(-1)

    def tangential_part(self, fields):
        nrm = self.normals
        return fields - (fields * nrm).sum(-1)[:, None] * nrm


# ---------------------------------------------------------------------------
# Surface differential operators (per patch, spectral)
# ---------------------------------------------------------------------------


def _patch_grids(patch, values):
    n = patch.grid.order
    return np.asarray(values).reshape(n, n)


def surface_divergence(patch, phi1, phi2):
    """Nodal div_G phi for contravariant components phi1, phi2 on the grid."""
    n = patch.grid.order
    phi1 = np.asarray(phi1)
    phi2 = np.asarray(phi2)
    if phi1.shape not in ((n, n), (n * n,)) or phi2.shape != phi1.shape:
        raise ShapeMismatchError("component grids do not match the patch order")
    p1 = phi1.reshape(n, n)
    p2 = phi2.reshape(n, n)
    sg = patch.sqrt_g.reshape(n, n)
    d = patch.grid.diff
    out = (d @ (sg * p1) + (sg * p2) @ d.T) / sg
    return out.reshape(phi1.shape)


def surface_divergence_expanded(patch, phi1, phi2):
    """Cross-check route: div_G via analytically expanded metric derivatives.

    Uses d_u phi1 + phi1 * (d_u sqrt|G|)/sqrt|G| with the logarithmic
    derivative computed from the chart's second derivatives instead of
    differentiating sqrt|G| numerically.
    """
    n = patch.grid.order
    md = patch.metric_data
    p1 = np.asarray(phi1).reshape(n, n)
    p2 = np.asarray(phi2).reshape(n, n)
    d = patch.grid.diff

    xu, xv = md.xu, md.xv
    xuu, xuv, xvv = md.xuu, md.xuv, md.xvv
    g11 = (xu * xu).sum(-1)
    g12 = (xu * xv).sum(-1)
    g22 = (xv * xv).sum(-1)
    det = g11 * g22 - g12 * g12
    lu = (g22 * (xu * xuu).sum(-1) + g11 * (xv * xuv).sum(-1)
          - g12 * ((xv * xuu).sum(-1) + (xu * xuv).sum(-1))) / det
    lv = (g22 * (xu * xuv).sum(-1) + g11 * (xv * xvv).sum(-1)
          - g12 * ((xv * xuv).sum(-1) + (xu * xvv).sum(-1))) / det
    out = (d @ p1 + lu.reshape(n, n) * p1) + (p2 @ d.T + lv.reshape(n, n) * p2)
    return out.reshape(np.asarray(phi1).shape)


def surface_gradient(patch, values):
    """Ambient grad_G of a nodal scalar (flattened, (N^2, 3))."""
    n = patch.grid.order
    vals = np.asarray(values).reshape(n, n)
    d = patch.grid.diff
    du = (d @ vals).reshape(-1)
    dv = (vals @ d.T).reshape(-1)
    gi = patch.metric_data.metric_inv
    a1 = gi[:, 0, 0] * du + gi[:, 0, 1] * dv
    a2 = gi[:, 1, 0] * du + gi[:, 1, 1] * dv
    return a1[:, None] * patch.metric_data.xu + a2[:, None] * patch.metric_data.xv


def surface_vector_curl(patch, values):
    """nu x grad_G of a nodal scalar, ambient (N^2, 3)."""
    grad = surface_gradient(patch, values)
    return np.cross(patch.normals, grad)


def div_matrix(surface):
    """(n_nodes, 2 n_nodes) matrix: interleaved components -> nodal div_G."""
    n_total = surface.n_nodes
    out = np.zeros((n_total, 2 * n_total))
    for q, patch in enumerate(surface.patches):
        n = patch.grid.order
        sl = surface.patch_slice(q)
        d = patch.grid.diff
        sg = patch.sqrt_g.reshape(n, n)
        block = np.zeros((n * n, 2 * n * n))
        eye = np.eye(n)
        ku = np.einsum("im,jn->ijmn", d, eye) * sg[None, None, :, :]
        kv = np.einsum("jn,im->ijmn", d, eye) * sg[None, None, :, :]
        ku = ku.reshape(n * n, n * n) / patch.sqrt_g[:, None]
        kv = kv.reshape(n * n, n * n) / patch.sqrt_g[:, None]
        block[:, 0::2] = ku
        block[:, 1::2] = kv
        out[sl, 2 * sl.start:2 * sl.stop] = block
    return out


def curl_matrix(surface):
    """(2 n_nodes, n_nodes) matrix: nodal scalar -> components of nu x grad_G."""
    n_total = surface.n_nodes
    out = np.zeros((2 * n_total, n_total))
    for q, patch in enumerate(surface.patches):
        n = patch.grid.order
        sl = surface.patch_slice(q)
        d = patch.grid.diff
        eye = np.eye(n)
        du = np.einsum("im,jn->ijmn", d, eye).reshape(n * n, n * n)
        dv = np.einsum("jn,im->ijmn", d, eye).reshape(n * n, n * n)
        gi = patch.metric_data.metric_inv
        # ambient field rows: sum_a (Ginv @ [du; dv])_a * x_a, then nu x .
        a1 = gi[:, 0, 0][:, None] * du + gi[:, 0, 1][:, None] * dv
        a2 = gi[:, 1, 0][:, None] * du + gi[:, 1, 1][:, None] * dv
        t1 = np.cross(patch.normals, patch.metric_data.xu)
        t2 = np.cross(patch.normals, patch.metric_data.xv)
        # project nu x grad onto contravariant components of the same patch
        proj = surface.comp_proj[sl]
        c1 = np.einsum("nak,nk->na", proj, t1)
        c2 = np.einsum("nak,nk->na", proj, t2)
        rows = np.empty((2 * n * n, n * n))
        rows[0::2] = c1[:, 0][:, None] * a1 + c2[:, 0][:, None] * a2
        rows[1::2] = c1[:, 1][:, None] * a1 + c2[:, 1][:, None] * a2
        out[2 * sl.start:2 * sl.stop, sl] = rows
    return out


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _axis_boundaries(a, outer, support, max_size):
    cuts = {-outer, -a, a, outer}
    if support and 0.0 < support < a:
        cuts.update((-support, support))
    bounds = sorted(cuts)
    if max_size and max_size > 0:
        refined = [bounds[0]]
        for right in bounds[1:]:
            left = refined[-1]
            pieces = max(1, int(np.ceil((right - left) / max_size - 1e-12)))
            refined.extend(left + (right - left) * (i + 1) / pieces for i in range(pieces))
        bounds = refined
    return bounds


def build_truncated_interface(profile, order, height=None, z0=0.0, max_patch_size=0.0):
    """Patch cover of a (possibly perturbed) graph interface over the full
    truncation footprint, with patch edges on the PHY/PML boundary and on the
    perturbation support square.

    The normal points downward (into the lower layer).
    """
    height = height if height is not None else ZeroHeight()
    if np.isfinite(height.support) and height.support > min(profile.a[0], profile.a[1]):
        raise UnsupportedGeometryError(
            "perturbation support exceeds the physical box B_a"
        )
    grid = ChebyshevGrid(order)
    bx = _axis_boundaries(profile.a[0], profile.outer[0], height.support, max_patch_size)
    by = _axis_boundaries(profile.a[1], profile.outer[1], height.support, max_patch_size)
    patches = []
    s = height.support
    for x0, x1 in zip(bx[:-1], bx[1:]):
        for y0, y1 in zip(by[:-1], by[1:]):
            cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            bumpy = np.isfinite(s) and s > 0 and abs(cx) < s and abs(cy) < s
            h = height if bumpy or not np.isfinite(s) else ZeroHeight()
            chart = GraphChart((x0, x1), (y0, y1), h, z0=z0)
            # xu x xv points up for a graph; flip so nu points into the lower layer
            patches.append(Patch(chart, grid, profile, orientation=-1.0,
                                 label=f"iface[{x0:g},{x1:g}]x[{y0:g},{y1:g}]"))
    return Surface(patches)


_FACE_FRAMES = {
    "+z": ((1, 0, 0), (0, 1, 0), (0, 0, 1)),
    "-z": ((0, 1, 0), (1, 0, 0), (0, 0, -1)),
    "+x": ((0, 1, 0), (0, 0, 1), (1, 0, 0)),
    "-x": ((0, 0, 1), (0, 1, 0), (-1, 0, 0)),
    "+y": ((0, 0, 1), (1, 0, 0), (0, 1, 0)),
    "-y": ((1, 0, 0), (0, 0, 1), (0, -1, 0)),
}


def build_sphere(center, radius, profile, order):
    """Six cube-to-sphere patches; normals point into the sphere (obstacle
    convention: the exterior domain is on the -nu side)."""
    center = np.asarray(center, dtype=float)
    if np.any(np.abs(center) + radius > np.asarray(profile.a)):
        raise UnsupportedGeometryError("obstacle escapes the physical box B_a")
    grid = ChebyshevGrid(order)
    patches = []
    for name, (t1, t2, d) in _FACE_FRAMES.items():
        rot = np.stack([np.asarray(t1, float), np.asarray(t2, float),
                        np.asarray(d, float)], axis=1)
        chart = SphereFaceChart(center, radius, rot)
        patches.append(Patch(chart, grid, profile, orientation=-1.0,
                             label=f"sphere{name}"))
    return patches


def build_torus(center, major, minor, profile, order):
    """Four torus patches; normals point into the torus body."""
    center = np.asarray(center, dtype=float)
    if np.any(np.abs(center[:2]) + major + minor > np.asarray(profile.a[:2])) or (
        abs(center[2]) + minor > profile.a[2]
    ):
        raise UnsupportedGeometryError("obstacle escapes the physical box B_a")
    grid = ChebyshevGrid(order)
    patches = []
    for pi0 in (-np.pi, 0.0):
        for th0 in (-np.pi, 0.0):
            chart = TorusChart(center, major, minor, (pi0, pi0 + np.pi),
                               (th0, th0 + np.pi))
            md = chart.derivatives(0.0, 0.0)
            cross = np.cross(md[1], md[2])
            radial = md[0] - center
            radial[2] = 0.0
            ring = center + radial * (major / max(np.linalg.norm(radial), 1e-300))
            outward = md[0] - ring
            orientation = -1.0 if float(cross @ outward) > 0 else 1.0
            patches.append(Patch(chart, grid, profile, orientation=orientation,
                                 label=f"torus[{pi0:.2f},{th0:.2f}]"))
    return patches


def build_box_lid(profile, order, z_bottom=0.0, max_patch_size=0.0):
    """Top and side faces closing the upper truncated domain above a graph
    interface whose footprint edge sits at height ``z_bottom``.  Normals point
    outward (away from the enclosed region)."""
    grid = ChebyshevGrid(order)
    ax, ay = profile.outer[0], profile.outer[1]
    top = profile.outer[2]
    patches = [
        Patch(AffineChart((0, 0, top), (ax, 0, 0), (0, ay, 0)), grid, profile,
              orientation=1.0, label="lid+z"),
    ]
    zc = 0.5 * (top + z_bottom)
    zh = 0.5 * (top - z_bottom)
    sides = [
        ((ax, 0, zc), (0, ay, 0), (0, 0, zh), "+x"),
        ((-ax, 0, zc), (0, 0, zh), (0, ay, 0), "-x"),
        ((0, ay, zc), (0, 0, zh), (ax, 0, 0), "+y"),
        ((0, -ay, zc), (ax, 0, 0), (0, 0, zh), "-y"),
    ]
    for origin, eu, ev, name in sides:
        chart = AffineChart(origin, eu, ev)
        cross = np.cross(chart.eu, chart.ev)
        outward = np.asarray(origin, float) - np.array([0.0, 0.0, zc])
        orientation = 1.0 if float(cross @ outward) > 0 else -1.0
        patches.append(Patch(chart, grid, profile, orientation=orientation,
                             label=f"lid{name}"))
    return patches


def combine_surfaces(*parts):
    """Flatten Surfaces and patch lists into one Surface."""
    patches = []
    for part in parts:
        if isinstance(part, Surface):
            patches.extend(part.patches)
        else:
            patches.extend(part)
    return Surface(patches)
