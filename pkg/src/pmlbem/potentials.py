"""Stretched layer potentials and boundary integral operators.

Discretization is Nystrom collocation at the Chebyshev nodes of each patch.
Densities are tangential fields stored as interleaved contravariant
components (node-major, component-fastest); operators map component vectors
to component vectors of the tangential output trace.

Kernels (b = B(y) phi(y), g = grad of the stretched kernel w.r.t. stretched
target coordinates):

  double layer      D: B(x) (g x b)
  double-layer BIO  K: nu_x x D-kernel                       (weakly singular)
  single layer      S: B(x) [k^2 phi b + Hess(phi) b]
  hyper-singular    N: nu_x x S-kernel         (regularized when on-surface)

The hyper-singular trace is only ever evaluated through the regularized
combination k^2 * (nu x B int phi B .) + curl_G int phi div_G(.), or through
the weakly singular difference kernel N_1 - N_2; the raw N kernel is used
solely for cross-interface (smooth) interactions and off-surface evaluation.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import warnings

import numpy as np
from scipy.spatial import cKDTree

from .errors import NearSingularError, ShapeMismatchError
from .geometry import Surface, curl_matrix, div_matrix
from .pml import kernel_factors, kernel_factors_hess, complex_distance_from_diff
from .quadrature import PolarRuleCache, sinh_tensor_rule


# ---------------------------------------------------------------------------
# Quadrature routing
# ---------------------------------------------------------------------------


@dataclass
class QuadratureRule:
    """Per-solve quadrature configuration and caches.

    ``polar_radial``/``polar_angular`` default to twice the grid order;
    ``near_factor`` sets the near-singular threshold delta_near in units of
    the local node spacing of the source patch.
    """

    order: int
    polar_radial: int = 0
    polar_angular: int = 0
    near_factor: float = 2.0
    near_order: int = 0
    min_offset: float = 0.0
    threads: int = 1
    _polar_caches: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.polar_radial <= 0:
            self.polar_radial = 2 * self.order
        if self.polar_angular <= 0:
            self.polar_angular = 2 * self.order
        if self.near_order <= 0:
            self.near_order = 2 * self.order + 4

    def polar_cache(self, grid):
        key = id(grid)
        cache = self._polar_caches.get(key)
        if cache is None:
            cache = PolarRuleCache(grid, self.polar_radial, self.polar_angular)
            self._polar_caches[key] = cache
        return cache

    def near_radius(self, patch):
        return self.near_factor * patch.spacing


def _patch_tree(patch):
    tree = getattr(patch, "_tree", None)
    if tree is None:
        tree = cKDTree(patch.nodes)
        patch._tree = tree
    return tree


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _mul_alpha(alpha, vec):
    return vec if alpha is None else alpha * vec


def make_kernel_K(k):
    def kern(dx, t_alpha, t_nu, src):
        rho = complex_distance_from_diff(dx)
        _, g = kernel_factors(k, rho)
        tan = src["tan"]
        out = np.empty(dx.shape[:-1] + (3, 2), dtype=complex)
        for c in range(2):
            w = np.cross(dx, tan[..., c]) * g[..., None]
            out[..., c] = np.cross(t_nu, _mul_alpha(t_alpha, w))
        return out

    return kern


def make_kernel_D(k):
    def kern(dx, t_alpha, t_nu, src):
        rho = complex_distance_from_diff(dx)
        _, g = kernel_factors(k, rho)
        tan = src["tan"]
        out = np.empty(dx.shape[:-1] + (3, 2), dtype=complex)
        for c in range(2):
            w = np.cross(dx, tan[..., c]) * g[..., None]
            out[..., c] = _mul_alpha(t_alpha, w)
        return out

    return kern


def make_kernel_S(k):
    def kern(dx, t_alpha, t_nu, src):
        rho = complex_distance_from_diff(dx)
        phi, g, gp = kernel_factors_hess(k, rho)
        tan = src["tan"]
        k2phi_g = k * k * phi + g
        out = np.empty(dx.shape[:-1] + (3, 2), dtype=complex)
        for c in range(2):
            b = tan[..., c]
            w = k2phi_g[..., None] * b + (gp * (dx * b).sum(-1))[..., None] * dx
            out[..., c] = _mul_alpha(t_alpha, w)
        return out

    return kern


def make_kernel_N(k):
    base = make_kernel_S(k)

    def kern(dx, t_alpha, t_nu, src):
        out = base(dx, t_alpha, t_nu, src)
        for c in range(2):
            out[..., c] = np.cross(t_nu, out[..., c])
        return out

    return kern


def make_kernel_N_difference(k1, k2):
    """Weakly singular kernel of N_1 - N_2 (the 1/r^3 parts cancel)."""

    def kern(dx, t_alpha, t_nu, src):
        rho = complex_distance_from_diff(dx)
        phi1, g1, gp1 = kernel_factors_hess(k1, rho)
        phi2, g2, gp2 = kernel_factors_hess(k2, rho)
        dphi = k1 * k1 * phi1 - k2 * k2 * phi2 + (g1 - g2)
        dgp = gp1 - gp2
        tan = src["tan"]
        out = np.empty(dx.shape[:-1] + (3, 2), dtype=complex)
        for c in range(2):
            b = tan[..., c]
            w = dphi[..., None] * b + (dgp * (dx * b).sum(-1))[..., None] * dx
            out[..., c] = np.cross(t_nu, _mul_alpha(t_alpha, w))
        return out

    return kern


def make_kernel_VSL(k):
    """nu_x x B(x) int phi B(y) phi(y): vector single layer, tangential trace."""

    def kern(dx, t_alpha, t_nu, src):
        rho = complex_distance_from_diff(dx)
        phi, _ = kernel_factors(k, rho)
        tan = src["tan"]
        out = np.empty(dx.shape[:-1] + (3, 2), dtype=complex)
        for c in range(2):
            out[..., c] = np.cross(t_nu, _mul_alpha(t_alpha, phi[..., None] * tan[..., c]))
        return out

    return kern


def make_kernel_SSL(k):
    """Scalar single layer: int phi(k; x, y) psi(y)."""

    def kern(dx, t_alpha, t_nu, src):
        rho = complex_distance_from_diff(dx)
        phi, _ = kernel_factors(k, rho)
        return phi[..., None, None]

    return kern


def make_kernel_laplace_dl():
    """nu_y^T A^{-1}(y) grad_y phi_0(x, y) = (nu~_y, xt - yt) / (4 pi rho^3)."""

    def kern(dx, t_alpha, t_nu, src):
        rho = complex_distance_from_diff(dx)
        _, g = kernel_factors(0.0, rho)
        alpha = src.get("alpha")
        nrm = src["normal"]
        if alpha is None:
            tilde = nrm
        else:
            prod = alpha[..., 0] * alpha[..., 1] * alpha[..., 2]
            tilde = nrm * (prod[..., None] / alpha)
        return -((tilde * dx).sum(-1) * g)[..., None, None]

    return kern


# ---------------------------------------------------------------------------
# Source/target contexts
# ---------------------------------------------------------------------------


def _source_far(surface, q, classical):
    sl = surface.patch_slice(q)
    xu = surface.xu[sl]
    xv = surface.xv[sl]
    if classical:
        yt = surface.nodes[sl]
        tan = np.stack([xu, xv], axis=-1).astype(complex)
        alpha = None
    else:
        yt = surface.nodes_stretched[sl]
        alpha = surface.alpha[sl]
        tan = np.stack([alpha * xu, alpha * xv], axis=-1)
    return {
        "yt": yt,
        "tan": tan,
        "alpha": alpha,
        "normal": surface.normals[sl],
        "weights": surface.weights[sl],
    }


def _source_at(patch, pts, profile, classical):
    x, xu, xv, nrm, sqrt_g = patch.chart_data(pts)
    if classical:
        yt = x
        tan = np.stack([xu, xv], axis=-1).astype(complex)
        alpha = None
    else:
        yt = profile.stretch(x)
        alpha = profile.alpha(x)
        tan = np.stack([alpha * xu, alpha * xv], axis=-1)
    return {
        "yt": yt,
        "tan": tan,
        "alpha": alpha,
        "normal": nrm,
        "sqrt_g": sqrt_g,
    }


@dataclass
class TargetContext:
    points: np.ndarray
    stretched: np.ndarray
    alpha: np.ndarray | None
    normals: np.ndarray | None
    proj: np.ndarray | None
    surface: Surface | None
    node_ids: np.ndarray | None = None

    @property
    def n(self):
        return self.points.shape[0]

    def global_ids(self, idx):
        return idx if self.node_ids is None else self.node_ids[idx]


def surface_targets(surface, profile, classical, project=True):
    return TargetContext(
        points=surface.nodes,
        stretched=surface.nodes.astype(complex) if classical else surface.nodes_stretched,
        alpha=None if classical else surface.alpha,
        normals=surface.normals,
        proj=surface.comp_proj if project else None,
        surface=surface,
    )


def point_targets(points, profile, classical, normals=None):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return TargetContext(
        points=points,
        stretched=points.astype(complex) if classical else profile.stretch(points),
        alpha=None if classical else profile.alpha(points),
        normals=None if normals is None else np.atleast_2d(np.asarray(normals, float)),
        proj=None,
        surface=None,
    )


# ---------------------------------------------------------------------------
# Core integration machinery
# ---------------------------------------------------------------------------


def _project_params(patch, targets, start_idx, iterations=4):
    """Clamped Gauss-Newton projection of physical targets onto the chart.

    Returns anchors (u0, v0), distances to the anchor image, and the local
    tangent scales |x_u|, |x_v| there.  ``start_idx`` are nearest-node flat
    indices used as initial guesses.
    """
    n = patch.grid.order
    i, j = np.divmod(start_idx, n)
    u = patch.grid.nodes[i].copy()
    v = patch.grid.nodes[j].copy()
    for _ in range(iterations):
        x, xu, xv, *_ = patch.chart.derivatives(u, v)
        r = x - targets
        g1 = (r * xu).sum(-1)
        g2 = (r * xv).sum(-1)
        a11 = (xu * xu).sum(-1)
        a12 = (xu * xv).sum(-1)
        a22 = (xv * xv).sum(-1)
        det = a11 * a22 - a12 * a12
        du = -(a22 * g1 - a12 * g2) / det
        dv = -(a11 * g2 - a12 * g1) / det
        u = np.clip(u + du, -1.0, 1.0)
        v = np.clip(v + dv, -1.0, 1.0)
    x, xu, xv, *_ = patch.chart.derivatives(u, v)
    dist = np.linalg.norm(x - targets, axis=-1)
    return u, v, dist, np.linalg.norm(xu, axis=-1), np.linalg.norm(xv, axis=-1)


def _special_blocks(kernel, tgt, t_idx, patch, pts, wts, profile, classical,
                    scalar_in):
    """Row blocks (T, 3 or 1, n_cols) for a batch of targets, each integrated
    over the same source patch with its own quadrature (pts (T, M, 2))."""
    t_count, m = pts.shape[0], pts.shape[1]
    flat = pts.reshape(-1, 2)
    src = _source_at(patch, flat, profile, classical)
    src_b = {
        "tan": src["tan"].reshape(t_count, m, 3, 2),
        "alpha": None if src["alpha"] is None else src["alpha"].reshape(t_count, m, 3),
        "normal": src["normal"].reshape(t_count, m, 3),
    }
    yt = src["yt"].reshape(t_count, m, 3)
    dx = tgt.stretched[t_idx][:, None, :] - yt
    t_alpha = None if tgt.alpha is None else tgt.alpha[t_idx][:, None, :]
    t_nu = None if tgt.normals is None else tgt.normals[t_idx][:, None, :]
    kval = kernel(dx, t_alpha, t_nu, src_b)
    w = wts * src["sqrt_g"].reshape(t_count, m)
    n = patch.grid.order
    lu = patch.grid.interp_matrix(flat[:, 0]).reshape(t_count, m, n)
    lv = patch.grid.interp_matrix(flat[:, 1]).reshape(t_count, m, n)
    interp = np.einsum("tmi,tmj->tmij", lu, lv).reshape(t_count, m, n * n)
    blocks = np.einsum("tmki,tmn->tkni", kval * w[..., None, None], interp)
    return blocks.reshape(t_count, blocks.shape[1], -1)


def _far_block(kernel, tgt, idx, src):
    dx = tgt.stretched[idx][:, None, :] - src["yt"][None, :, :]
    t_alpha = None if tgt.alpha is None else tgt.alpha[idx][:, None, :]
    t_nu = None if tgt.normals is None else tgt.normals[idx][:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        kval = kernel(dx, t_alpha, t_nu, src)
    return kval * src["weights"][None, :, None, None]


def _operate(kernel, tgt, src_surface, profile, rule, classical=False,
             scalar_in=False, density=None, reject_below=None):
    """Assemble (or apply, if ``density`` is given) one boundary operator.

    Returns the dense matrix (rows x cols) or the applied vector (rows,).
    Row layout: 2 rows per target (components) when ``tgt.proj`` is present,
    else 3 ambient rows per target (1 for scalar kernels).  Column layout:
    2 per source node (1 for ``scalar_in``).
    """
    in_dim = 1 if scalar_in else 2
    n_t = tgt.n
    n_cols = src_surface.n_nodes * in_dim
    row_dim = 1 if scalar_in else (2 if tgt.proj is not None else 3)

    if density is not None:
        if density.shape[0] != n_cols:
            raise ShapeMismatchError("density length does not match source surface")
        result = np.zeros(n_t * row_dim, dtype=complex)
    else:
        result = np.zeros((n_t * row_dim, n_cols), dtype=complex)

    sources = [_source_far(src_surface, q, classical)
               for q in range(len(src_surface.patches))]
    chunk = max(8, min(512, 20_000_000 // max(src_surface.n_nodes, 1)))
    chunks = [np.arange(s, min(s + chunk, n_t)) for s in range(0, n_t, chunk)]
    batch = max(1, 4_000_000 // max(rule.polar_radial * rule.polar_angular * 4
                                    * patchsize_sq(src_surface), 1))

    def process(idx):
        rows = np.zeros((idx.size * row_dim, n_cols), dtype=complex)
        for q, patch in enumerate(src_surface.patches):
            sl = src_surface.patch_slice(q)
            cols = slice(sl.start * in_dim, sl.stop * in_dim)
            src = sources[q]
            dmin, nearest = _patch_tree(patch).query(tgt.points[idx])
            if tgt.surface is src_surface:
                gid = tgt.global_ids(idx)
                own = (gid >= sl.start) & (gid < sl.stop)
            else:
                gid = idx
                own = np.zeros(idx.size, dtype=bool)
            if reject_below is not None and np.any(~own & (dmin < reject_below)):
                raise NearSingularError(
                    "evaluation point within the minimum offset of a surface"
                )
            near = ~own & (dmin < rule.near_radius(patch))
            far = ~(own | near)
            if np.any(far):
                kblk = _far_block(kernel, tgt, idx[far], src)
                rows_far = _project_rows(kblk, tgt, idx[far], row_dim)
                _scatter(rows, rows_far, np.where(far)[0], row_dim, cols)
            if np.any(own):
                pts_all, wts_all = rule.polar_cache(patch.grid).stacked()
                t_glob = idx[own]
                node_local = gid[own] - sl.start
                local = np.where(own)[0]
                for s in range(0, t_glob.size, batch):
                    tg = t_glob[s:s + batch]
                    lc = local[s:s + batch]
                    pts = pts_all[node_local[s:s + batch]]
                    wts = wts_all[node_local[s:s + batch]]
                    blocks = _special_blocks(kernel, tgt, tg, patch, pts, wts,
                                             profile, classical, scalar_in)
                    _scatter_blocks(rows, blocks, tgt, tg, lc, row_dim, cols)
            if np.any(near):
                t_glob = idx[near]
                local = np.where(near)[0]
                u0, v0, dist, su, sv = _project_params(
                    patch, tgt.points[t_glob], nearest[near]
                )
                dist = np.maximum(dist, 1e-12 * patch.diameter)
                pts, wts = sinh_tensor_rule(u0, v0, dist / su, dist / sv,
                                            rule.near_order)
                for s in range(0, t_glob.size, batch):
                    tg = t_glob[s:s + batch]
                    lc = local[s:s + batch]
                    blocks = _special_blocks(kernel, tgt, tg, patch,
                                             pts[s:s + batch], wts[s:s + batch],
                                             profile, classical, scalar_in)
                    _scatter_blocks(rows, blocks, tgt, tg, lc, row_dim, cols)
        return rows

    def finalize(idx, rows):
        r0 = idx[0] * row_dim
        r1 = (idx[-1] + 1) * row_dim
        if density is not None:
            result[r0:r1] = rows @ density
        else:
            result[r0:r1] = rows

    if rule.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=rule.threads) as pool:
            for idx, rows in zip(chunks, pool.map(process, chunks)):
                finalize(idx, rows)
    else:
        for idx in chunks:
            finalize(idx, process(idx))
    return result


def patchsize_sq(surface):
    return max(p.grid.order**2 for p in surface.patches)


def _project_rows(kblk, tgt, idx, row_dim):
    """(T, S, 3, in) -> (T*row_dim, S*in) with optional component projection."""
    if row_dim == 2:
        out = np.einsum("tab,tsbi->tasi", tgt.proj[idx], kblk)
    elif row_dim == 3:
        out = kblk.transpose(0, 2, 1, 3)
    else:  # scalar
        out = kblk
    t = idx.size
    return out.reshape(t * row_dim, -1)


def _scatter_blocks(rows, blocks, tgt, t_glob, local_idx, row_dim, cols):
    for bi, (li, t) in enumerate(zip(local_idx, t_glob)):
        blk = blocks[bi]
        if row_dim == 2:
            blk = tgt.proj[t] @ blk
        rows[li * row_dim:(li + 1) * row_dim, cols] = blk


def _scatter(rows, block, local_idx, row_dim, cols):
    for bi, li in enumerate(local_idx):
        rows[li * row_dim:(li + 1) * row_dim, cols] = \
            block[bi * row_dim:(bi + 1) * row_dim]


# ---------------------------------------------------------------------------
# Public operator types and assemblers
# ---------------------------------------------------------------------------


@dataclass
class OperatorMatrix:
    """Dense operator block with identifying tags."""

    matrix: np.ndarray
    kind: str
    wavenumber: float
    source: object = None
    target: object = None

    @property
    def shape(self):
        return self.matrix.shape


class DensityGrid:
    """Tangential density on a surface: interleaved contravariant components."""

    def __init__(self, surface, comps):
        comps = np.asarray(comps, dtype=complex)
        if comps.shape != (surface.n_dofs,):
            raise ShapeMismatchError("density vector does not match the surface")
        self.surface = surface
        self.comps = comps

    def ambient(self):
        return self.surface.components_to_ambient(self.comps)

    def node_magnitudes(self):
        return np.linalg.norm(self.ambient(), axis=1)

    def region_max(self, pml=False, outer_fraction=None):
        """Max |density| over the physical (or PML) nodes; ``outer_fraction``
        restricts the PML part to the outer fraction of the absorber depth."""
        mags = self.node_magnitudes()
        mask = self.surface.pml_region if pml else ~self.surface.pml_region
        if pml and outer_fraction is not None:
            depth = _pml_depth_fraction(self.surface)
            mask = mask & (depth >= 1.0 - outer_fraction)
        if not np.any(mask):
            return 0.0
        return float(mags[mask].max())

    def decay_diagnostic(self):
        """Ratio of the outer-third PML maximum to the physical maximum."""
        phys = self.region_max(pml=False)
        outer = self.region_max(pml=True, outer_fraction=1.0 / 3.0)
        return outer / phys if phys > 0 else np.inf


def _pml_depth_fraction(surface):
    """Per-node relative depth into the lateral absorber, in [0, 1]."""
    prof = getattr(surface, "profile", None)
    x = surface.nodes
    if prof is None:
        # reconstruct from node extents: onset at the largest |x| that is PHY
        raise ValueError("surface has no PML profile attached")
    fr = np.zeros(surface.n_nodes)
    for axis in range(2):
        a = prof.a[axis]
        t = prof.thickness[axis]
        fr = np.maximum(fr, np.clip((np.abs(x[:, axis]) - a) / t, 0.0, 1.0))
    return fr


def warn_if_not_decayed(surface, comps, threshold=1e-3, label="density"):
    """Diagnostic required by the regularized hyper-singular route: the
    density should vanish toward the outer boundary of the truncated surface."""
    grid = DensityGrid(surface, comps)
    edge = _edge_max(surface, grid.node_magnitudes())
    peak = grid.node_magnitudes().max()
    if peak > 0 and edge > threshold * peak:
        warnings.warn(
            f"{label} does not decay at the outer boundary "
            f"(edge/peak = {edge / peak:.2e}); the regularized hyper-singular "
            "representation assumes a vanishing trace there",
            stacklevel=2,
        )


def _edge_max(surface, mags):
    out = 0.0
    lo = surface.nodes[:, :2].min(axis=0)
    hi = surface.nodes[:, :2].max(axis=0)
    margin = 0.05 * max(hi[0] - lo[0], hi[1] - lo[1])
    edge = (
        (surface.nodes[:, 0] < lo[0] + margin) | (surface.nodes[:, 0] > hi[0] - margin)
        | (surface.nodes[:, 1] < lo[1] + margin) | (surface.nodes[:, 1] > hi[1] - margin)
    )
    if np.any(edge):
        out = float(mags[edge].max())
    return out


def assemble_K(k, src_surface, profile, rule, tgt_surface=None, classical=False,
               target_points=None, target_normals=None):
    """Magnetic-dipole-type BIO: nu_x x B(x) grad~ x int phi B(y) phi(y)."""
    kern = make_kernel_K(k)
    if target_points is not None:
        tgt = point_targets(target_points, profile, classical, target_normals)
        mat = _operate(kern, tgt, src_surface, profile, rule, classical)
        return OperatorMatrix(mat, "K", k, src_surface, None)
    tgt_surface = tgt_surface or src_surface
    tgt = surface_targets(tgt_surface, profile, classical)
    mat = _operate(kern, tgt, src_surface, profile, rule, classical)
    return OperatorMatrix(mat, "K", k, src_surface, tgt_surface)


def assemble_vector_single_layer(k, src_surface, profile, rule, tgt_surface=None,
                                 classical=False):
    tgt_surface = tgt_surface or src_surface
    tgt = surface_targets(tgt_surface, profile, classical)
    mat = _operate(make_kernel_VSL(k), tgt, src_surface, profile, rule, classical)
    return OperatorMatrix(mat, "VSL", k, src_surface, tgt_surface)


def assemble_scalar_single_layer(k, src_surface, profile, rule, tgt_surface=None,
                                 classical=False):
    tgt_surface = tgt_surface or src_surface
    tgt = surface_targets(tgt_surface, profile, classical, project=False)
    tgt = TargetContext(tgt.points, tgt.stretched, tgt.alpha, None, None, tgt.surface)
    mat = _operate(make_kernel_SSL(k), tgt, src_surface, profile, rule, classical,
                   scalar_in=True)
    return OperatorMatrix(mat, "SSL", k, src_surface, tgt_surface)


def assemble_N_regularized(k, src_surface, profile, rule, tgt_surface=None,
                           classical=False):
    """Hyper-singular BIO via the weakly singular regularization
    k^2 (nu x B int phi B .) + curl_G int phi div_G(.)."""
    tgt_surface = tgt_surface or src_surface
    vsl = assemble_vector_single_layer(k, src_surface, profile, rule, tgt_surface,
                                       classical)
    ssl = assemble_scalar_single_layer(k, src_surface, profile, rule, tgt_surface,
                                       classical)
    div = div_matrix(src_surface)
    curl = curl_matrix(tgt_surface)
    mat = (k * k) * vsl.matrix + curl @ (ssl.matrix @ div)
    return OperatorMatrix(mat, "N_reg", k, src_surface, tgt_surface)


def assemble_N_difference(k1, k2, src_surface, profile, rule, tgt_surface=None,
                          classical=False):
    """N_1 - N_2 through its weakly singular difference kernel."""
    tgt_surface = tgt_surface or src_surface
    tgt = surface_targets(tgt_surface, profile, classical)
    mat = _operate(make_kernel_N_difference(k1, k2), tgt, src_surface, profile, rule,
                   classical)
    return OperatorMatrix(mat, "N_diff", (k1, k2), src_surface, tgt_surface)


def assemble_N_smooth(k, src_surface, tgt_surface, profile, rule, classical=False):
    """Raw hyper-singular kernel between disjoint surfaces (smooth case)."""
    if tgt_surface is src_surface:
        raise ValueError("raw N kernel requires disjoint source and target")
    tgt = surface_targets(tgt_surface, profile, classical)
    mat = _operate(make_kernel_N(k), tgt, src_surface, profile, rule, classical)
    return OperatorMatrix(mat, "N_smooth", k, src_surface, tgt_surface)


def apply_N_regularized(k, surface, comps, profile, rule, classical=False,
                        decay_check=True):
    """Action of the regularized hyper-singular operator on a density."""
    comps = np.asarray(comps, dtype=complex)
    if decay_check:
        warn_if_not_decayed(surface, comps)
    tgt = surface_targets(surface, profile, classical)
    vsl = _operate(make_kernel_VSL(k), tgt, surface, profile, rule, classical,
                   density=comps)
    psi = apply_surface_divergence(surface, comps)
    tgt_s = TargetContext(tgt.points, tgt.stretched, tgt.alpha, None, None, surface)
    w = _operate(make_kernel_SSL(k), tgt_s, surface, profile, rule, classical,
                 scalar_in=True, density=psi)
    return (k * k) * vsl + apply_surface_curl(surface, w)


def apply_surface_divergence(surface, comps):
    """Nodal div_G of an interleaved component vector (per patch, spectral)."""
    out = np.empty(surface.n_nodes, dtype=complex)
    c = np.asarray(comps).reshape(surface.n_nodes, 2)
    for q, patch in enumerate(surface.patches):
        sl = surface.patch_slice(q)
        n = patch.grid.order
        d = patch.grid.diff
        sg = patch.sqrt_g.reshape(n, n)
        p1 = c[sl, 0].reshape(n, n)
        p2 = c[sl, 1].reshape(n, n)
        out[sl] = ((d @ (sg * p1) + (sg * p2) @ d.T) / sg).reshape(-1)
    return out


def apply_surface_curl(surface, scalars):
    """Components of nu x grad_G of a nodal scalar (per patch, spectral)."""
    out = np.empty(surface.n_dofs, dtype=complex)
    s = np.asarray(scalars)
    for q, patch in enumerate(surface.patches):
        sl = surface.patch_slice(q)
        n = patch.grid.order
        d = patch.grid.diff
        vals = s[sl].reshape(n, n)
        du = (d @ vals).reshape(-1)
        dv = (vals @ d.T).reshape(-1)
        gi = patch.metric_data.metric_inv
        a1 = gi[:, 0, 0] * du + gi[:, 0, 1] * dv
        a2 = gi[:, 1, 0] * du + gi[:, 1, 1] * dv
        amb = a1[:, None] * patch.metric_data.xu + a2[:, None] * patch.metric_data.xv
        amb = np.cross(patch.normals, amb)
        proj = surface.comp_proj[sl]
        out[2 * sl.start:2 * sl.stop] = np.einsum("nak,nk->na", proj, amb).reshape(-1)
    return out


# ---------------------------------------------------------------------------
# Off-surface potential evaluation
# ---------------------------------------------------------------------------


def eval_potential(kind, k, surface, comps, points, profile, rule, classical=False):
    """S~ or D~ applied to a density, evaluated at off-surface points (P, 3)."""
    if kind not in ("S", "D"):
        raise ValueError("kind must be 'S' or 'D'")
    kern = make_kernel_S(k) if kind == "S" else make_kernel_D(k)
    tgt = point_targets(points, profile, classical)
    reject = rule.min_offset if rule.min_offset > 0 else 1e-5 * surface.diameter
    vals = _operate(kern, tgt, surface, profile, rule, classical,
                    density=np.asarray(comps, dtype=complex), reject_below=reject)
    return vals.reshape(-1, 3)


def eval_scalar_single_layer(k, surface, scalars, points, profile, rule,
                             classical=False, on_surface=False):
    """int phi(k; x, y) psi(y) ds_y at arbitrary targets.

    ``on_surface`` switches to the weakly singular self-surface path with
    targets at the surface nodes (``points`` is then ignored).
    """
    scal = np.asarray(scalars, dtype=complex)
    if on_surface:
        tgt = surface_targets(surface, profile, classical, project=False)
        tgt = TargetContext(tgt.points, tgt.stretched, tgt.alpha, None, None,
                            tgt.surface)
    else:
        tgt = point_targets(points, profile, classical)
    return _operate(make_kernel_SSL(k), tgt, surface, profile, rule, classical,
                    scalar_in=True, density=scal)


def laplace_identity_values(surface, points, profile, rule, node_indices=None,
                            classical=False):
    """Quadrature of the stretched-Laplace double layer with unit density.

    Returns the values at interior ``points`` (expected -1) and, when
    ``node_indices`` is given, at those surface nodes (expected -1/2).
    """
    kern = make_kernel_laplace_dl()
    ones = np.ones(surface.n_nodes, dtype=complex)
    out = []
    if points is not None and len(points):
        tgt = point_targets(points, profile, classical)
        out.append(_operate(kern, tgt, surface, profile, rule, classical,
                            scalar_in=True, density=ones))
    if node_indices is not None and len(node_indices):
        tgt_all = surface_targets(surface, profile, classical, project=False)
        idx = np.asarray(node_indices, dtype=int)
        tgt = TargetContext(
            tgt_all.points[idx], tgt_all.stretched[idx],
            None if tgt_all.alpha is None else tgt_all.alpha[idx],
            None, None, surface, node_ids=idx,
        )
        out.append(_operate(kern, tgt, surface, profile, rule, classical,
                            scalar_in=True, density=ones))
    return out


# ---------------------------------------------------------------------------
# Jump-relation diagnostics
# ---------------------------------------------------------------------------


def jump_test(kind, k, surface, comps, h_values, target_indices, profile, rule,
              classical=False):
    """Max-norm discrepancy between the off-surface trace at x -+ h nu and the
    corresponding BIO (+- I/2) limit, for each h.

    ``kind``: 'D1', 'D2', 'S1', 'S2' (potential and approach side).
    """
    comps = np.asarray(comps, dtype=complex)
    idx = np.asarray(target_indices, dtype=int)
    side = -1.0 if kind.endswith("1") else 1.0
    if kind.startswith("D"):
        K = assemble_K(k, surface, profile, rule, classical=classical).matrix
        ref_c = K @ comps + 0.5 * side * comps
    else:
        ref_c = apply_N_regularized(k, surface, comps, profile, rule,
                                    classical=classical, decay_check=False)
    ref_amb = surface.components_to_ambient(ref_c)[idx]

    nrm = surface.normals[idx]
    base = surface.nodes[idx]
    out = np.empty(len(h_values))
    for m, h in enumerate(h_values):
        pts = base + side * h * nrm
        vals = eval_potential(kind[0], k, surface, comps, pts, profile, rule,
                              classical=classical)
        disc = np.cross(nrm, vals) - ref_amb
        out[m] = float(np.linalg.norm(disc, axis=1).max())
    return out
