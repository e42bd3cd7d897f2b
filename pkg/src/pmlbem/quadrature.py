"""Singular and near-singular quadrature on logically rectangular patches.

Self-patch (weakly singular) targets use a rectangular-polar rule: the
parameter square is split into four triangles around the target's parameter
point, and each triangle is integrated in polar coordinates with
Gauss-Legendre nodes in angle and radius; the radial Jacobian r dr absorbs an
O(1/r) kernel singularity.

Off-patch targets close to a source patch use a composite Gauss rule on a
quadtree refined toward the target: a cell is accepted once its physical
diameter is below ``eta`` times its distance to the target, so the kernel is
resolved at every scale down to the target distance.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

_SQUARE_CORNERS = np.array(
    [(1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0)]
)
# sides in counterclockwise corner order: (corner_start, corner_end, normal, offset)
_SQUARE_SIDES = [
    ((1.0, -1.0), (1.0, 1.0), (1.0, 0.0)),
    ((1.0, 1.0), (-1.0, 1.0), (0.0, 1.0)),
    ((-1.0, 1.0), (-1.0, -1.0), (-1.0, 0.0)),
    ((-1.0, -1.0), (1.0, -1.0), (0.0, -1.0)),
]


@lru_cache(maxsize=64)
def _gauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def polar_square_rule(u0, v0, n_radial, n_angular):
    """Quadrature (points (M, 2), weights (M,)) for int over [-1,1]^2 of
    functions with an O(1/r) singularity at the interior point (u0, v0)."""
    gr, wr = _gauss(n_radial)
    gt, wt = _gauss(n_angular)
    pts = []
    wts = []
    p0 = np.array([u0, v0])
    for start, end, normal in _SQUARE_SIDES:
        a1 = np.arctan2(start[1] - v0, start[0] - u0)
        a2 = np.arctan2(end[1] - v0, end[0] - u0)
        if a2 <= a1:
            a2 += 2.0 * np.pi
        half = 0.5 * (a2 - a1)
        mid = 0.5 * (a2 + a1)
        theta = mid + half * gt
        wth = half * wt
        n_vec = np.array(normal)
        c = 1.0 - float(n_vec @ p0)
        direction = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        rmax = c / (direction @ n_vec)
        # r in (0, rmax(theta)]
        r = 0.5 * rmax[:, None] * (gr + 1.0)
        wrad = 0.5 * rmax[:, None] * wr
        p = p0 + r[..., None] * direction[:, None, :]
        w = (wth[:, None] * wrad) * r
        pts.append(p.reshape(-1, 2))
        wts.append(w.reshape(-1))
    return np.concatenate(pts), np.concatenate(wts)


class PolarRuleCache:
    """Per-grid cache of polar rules for each tensor node of the grid."""

    def __init__(self, grid, n_radial, n_angular):
        self.grid = grid
        self.n_radial = n_radial
        self.n_angular = n_angular
        self._cache = {}
        self._stacked = None

    def rule(self, flat_index):
        hit = self._cache.get(flat_index)
        if hit is None:
            n = self.grid.order
            i, j = divmod(flat_index, n)
            hit = polar_square_rule(
                self.grid.nodes[i], self.grid.nodes[j], self.n_radial, self.n_angular
            )
            self._cache[flat_index] = hit
        return hit

    def stacked(self):
        """All rules stacked: points (N^2, M, 2) and weights (N^2, M)."""
        if self._stacked is None:
            n2 = self.grid.order**2
            rules = [self.rule(t) for t in range(n2)]
            pts = np.stack([r[0] for r in rules])
            wts = np.stack([r[1] for r in rules])
            self._stacked = (pts, wts)
        return self._stacked


def sinh_tensor_rule(u0, v0, delta_u, delta_v, n):
    """Tensor Gauss rules on [-1,1]^2, graded via a sinh transform toward the
    per-target anchors (u0, v0) with resolution scales (delta_u, delta_v).

    All anchor arguments are arrays of shape (T,); returns points (T, n*n, 2)
    and weights (T, n*n).  Resolves kernels with a near-singularity at
    parameter distance ~delta from the anchor.
    """
    gx, gw = _gauss(n)

    def axis(c0, delta):
        w_lo = np.arcsinh((-1.0 - c0) / delta)
        w_hi = np.arcsinh((1.0 - c0) / delta)
        half = 0.5 * (w_hi - w_lo)
        mid = 0.5 * (w_hi + w_lo)
        w = mid[:, None] + half[:, None] * gx
        nodes = c0[:, None] + delta[:, None] * np.sinh(w)
        weights = (half[:, None] * gw) * (delta[:, None] * np.cosh(w))
        return nodes, weights

    un, uw = axis(np.asarray(u0, float), np.asarray(delta_u, float))
    vn, vw = axis(np.asarray(v0, float), np.asarray(delta_v, float))
    pts = np.empty((un.shape[0], n * n, 2))
    pts[:, :, 0] = np.repeat(un, n, axis=1)
    pts[:, :, 1] = np.tile(vn, (1, n))
    wts = (uw[:, :, None] * vw[:, None, :]).reshape(un.shape[0], n * n)
    return pts, wts


def refined_square_rule(chart_eval, target, eta=0.5, leaf_order=8, max_depth=24,
                        min_leaves=4):
    """Composite tensor Gauss rule on [-1,1]^2 graded toward ``target``.

    ``chart_eval(pts)`` maps parameter points (M, 2) to physical points
    (M, 3); ``target`` is the physical evaluation point.  Cells are split
    until their image diameter is at most ``eta`` times a conservative lower
    bound of their distance to the target.
    """
    target = np.asarray(target, dtype=float)
    gx, gw = _gauss(leaf_order)
    sample_offsets = np.array(
        [(0.0, 0.0), (-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0),
         (0.0, -1.0), (0.0, 1.0), (-1.0, 0.0), (1.0, 0.0)]
    )
    stack = [(-1.0, -1.0, 2.0, 0)]
    leaves = []
    while stack:
        u0, v0, size, depth = stack.pop()
        half = 0.5 * size
        centers = np.array([u0 + half, v0 + half])
        samples = centers + half * sample_offsets
        phys = chart_eval(samples)
        diam = 0.0
        for corner in phys[1:5]:
            diam = max(diam, float(np.linalg.norm(corner - phys[0])))
        diam *= 2.0
        dist = float(np.min(np.linalg.norm(phys - target, axis=1)))
        dist = max(dist - 0.5 * diam, 0.0)
        if depth >= max_depth or diam <= eta * dist:
            leaves.append((u0, v0, size))
        else:
            h = half
            stack.extend(
                (u0 + du, v0 + dv, h, depth + 1)
                for du in (0.0, h)
                for dv in (0.0, h)
            )
    pts = np.empty((len(leaves) * leaf_order**2, 2))
    wts = np.empty(len(leaves) * leaf_order**2)
    block = leaf_order**2
    uu, vv = np.meshgrid(gx, gx, indexing="ij")
    ww = np.outer(gw, gw).ravel()
    for idx, (u0, v0, size) in enumerate(leaves):
        h = 0.5 * size
        pts[idx * block:(idx + 1) * block, 0] = u0 + h * (uu.ravel() + 1.0)
        pts[idx * block:(idx + 1) * block, 1] = v0 + h * (vv.ravel() + 1.0)
        wts[idx * block:(idx + 1) * block] = h * h * ww
    return pts, wts
