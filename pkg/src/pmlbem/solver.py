"""Block BIE assembly, GMRES solution and field reconstruction.

Unknowns are the lower-side scattered-field traces per interface,
phi_j = (M_j; J_j), stored interface-major with M before J; each of M and J
is an interleaved component vector (node-major, component-fastest).  The
two-layer system is the Muller-type combination

    [ (e1+e2)/2 I + e1 K1 - e2 K2        (i/w)(N1 - N2) ] [M]   [e1 f]
    [ (i/w)(N2 - N1)      (m1+m2)/2 I + m1 K1 - m2 K2   ] [J] = [m1 g],

the multilayer system is block tridiagonal with the analogous coupling
blocks, and the half-space PEC/PMC problems reduce to (K + I/2) on the
combined obstacle/interface surface.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import IterativeSolveError, UndefinedMetricError, ValidationError
from .geometry import (
    CosineBump,
    GaussianBump,
    Surface,
    ZeroHeight,
    build_sphere,
    build_torus,
    build_truncated_interface,
    combine_surfaces,
)
from .incidence import (
    DipoleSpec,
    LayeredStack,
    MediumSpec,
    PlaneWaveSpec,
    boundary_data,
    source_fields,
    stretched_trace,
)
from .pml import PmlProfile
from .potentials import (
    DensityGrid,
    QuadratureRule,
    apply_N_regularized,
    assemble_K,
    assemble_N_difference,
    assemble_N_regularized,
    assemble_N_smooth,
    eval_potential,
)


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------


@dataclass
class SolverSettings:
    tol: float = 1e-8
    restart: int = 200
    max_iter: int = 2000
    rhs_variant: str = "derived"       # derived | paper
    n_difference: str = "direct"       # direct | regularized
    threads: int = 1
    deterministic: bool = False


@dataclass
class Obstacle:
    kind: str                          # sphere | torus
    center: tuple
    radius: float = 1.0
    major: float = 1.0
    minor: float = 0.3
    condition: str = "pec"             # pec | pmc | penetrable


@dataclass
class LayeredScene:
    """Everything needed to discretize and solve one scattering problem."""

    media: MediumSpec
    heights: tuple
    perturbations: list
    incidence: object
    profile: PmlProfile
    order: int
    obstacle: Obstacle | None = None
    max_patch_size: float = 0.0
    quadrature: dict = field(default_factory=dict)
    settings: SolverSettings = field(default_factory=SolverSettings)
    _surfaces: list = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        n = self.media.n_layers
        if len(self.heights) != n - 1:
            raise ValidationError("interfaces: need N-1 heights for N layers")
        if len(self.perturbations) != n - 1:
            raise ValidationError("interfaces: one perturbation entry per interface")
        a = self.profile.a
        for z, pert in zip(self.heights, self.perturbations):
            if abs(z) >= a[2]:
                raise ValidationError(
                    "interfaces: reference heights must lie inside the physical box"
                )
            if pert is not None and np.isfinite(pert.support):
                if pert.support > min(a[0], a[1]):
                    raise ValidationError(
                        "interfaces: perturbation escapes the physical box B_a"
                    )
        if isinstance(self.incidence, PlaneWaveSpec):
            if self.incidence.k_z <= 0:
                raise ValidationError("incidence: k_{1,x3} must be positive")
            self._check_trace_growth()
        elif isinstance(self.incidence, DipoleSpec):
            z = np.asarray(self.incidence.location)
            if np.any(np.abs(z) >= np.asarray(a)):
                raise ValidationError("incidence: dipole must lie inside B_a")
            if self.obstacle is None and z[2] <= self.heights[0]:
                raise ValidationError("incidence: dipole must lie inside layer 1")
        if self.obstacle is not None and self.media.n_layers > 2:
            raise ValidationError("obstacle: only supported in half-space scenes")

    def _check_trace_growth(self):
        pw = self.incidence.normalized(self.media.wavenumber(1))
        prof = self.profile
        bound = abs(pw.k_y) * (prof.ramp_integral(1)) + abs(pw.k_z) * (
            prof.ramp_integral(2)
        )
        if bound > 50.0:
            raise ValidationError(
                "incidence: |Im(k.x~)| exceeds 50 on the truncated interface; "
                "reduce obliquity or the PML strength/thickness"
            )

    @property
    def stack(self):
        return LayeredStack(self.media, self.heights)

    def interface_surfaces(self):
        if self._surfaces is None:
            self._surfaces = []
            for z, pert in zip(self.heights, self.perturbations):
                surf = build_truncated_interface(
                    self.profile, self.order, height=pert, z0=z,
                    max_patch_size=self.max_patch_size,
                )
                surf.profile = self.profile
                self._surfaces.append(surf)
        return self._surfaces

    def obstacle_patches(self):
        obs = self.obstacle
        if obs is None:
            return []
        if obs.kind == "sphere":
            return build_sphere(obs.center, obs.radius, self.profile, self.order)
        if obs.kind == "torus":
            return build_torus(obs.center, obs.major, obs.minor, self.profile,
                               self.order)
        raise ValidationError(f"obstacle: unknown kind {obs.kind!r}")

    def half_space_surface(self):
        """Gamma_* = obstacle boundary plus the truncated ground interface."""
        surf = combine_surfaces(self.obstacle_patches(),
                                self.interface_surfaces()[0])
        surf.profile = self.profile
        return surf

    def rule(self):
        q = dict(self.quadrature)
        q.setdefault("threads", self.settings.threads)
        return QuadratureRule(order=self.order, **q)

    def surface_height(self, i, x1, x2):
        pert = self.perturbations[i]
        z = self.heights[i]
        if pert is None:
            return np.full(np.broadcast(x1, x2).shape, z, dtype=float)
        return z + pert.value(x1, x2)

    def layer_of_points(self, points):
        """Layer index per point, honoring interface perturbations."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.ones(pts.shape[0], dtype=int)
        for i in range(len(self.heights)):
            below = pts[:, 2] < self.surface_height(i, pts[:, 0], pts[:, 1])
            out = np.where(below, i + 2, out)
        return out


# ---------------------------------------------------------------------------
# Block system
# ---------------------------------------------------------------------------


@dataclass
class BlockSystem:
    """Block-tridiagonal dense system over per-interface unknowns (M_j; J_j)."""

    blocks: dict
    sizes: list
    scene: LayeredScene = None
    meta: dict = field(default_factory=dict)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def shape(self):
        n = int(self.offsets[-1])
        return (n, n)

    def matvec(self, x):
        y = np.zeros_like(x)
        off = self.offsets
        for (i, j), blk in self.blocks.items():
            y[off[i]:off[i + 1]] += blk @ x[off[j]:off[j + 1]]
        return y

    def to_dense(self):
        n = self.shape[0]
        out = np.zeros((n, n), dtype=complex)
        off = self.offsets
        for (i, j), blk in self.blocks.items():
            out[off[i]:off[i + 1], off[j]:off[j + 1]] = blk
        return out

    def operator(self):
        return spla.LinearOperator(self.shape, matvec=self.matvec, dtype=complex)


@dataclass
class SolveReport:
    iterations: int
    residual: float
    wall_time: float
    phys_max: float = 0.0
    pml_max: float = 0.0
    pml_outer_max: float = 0.0
    rhs_variant: str = ""
    extras: dict = field(default_factory=dict)


def _coupled_block(k_mat_1, k_mat_2, n_mat, eps_pair, mu_pair, omega):
    """2x2 block [[e1 K1 - e2 K2, (i/w) N], [-(i/w) N, m1 K1 - m2 K2]] plus
    the diagonal averages."""
    e1, e2 = eps_pair
    m1, m2 = mu_pair
    n = k_mat_1.shape[0]
    top = e1 * k_mat_1 - e2 * k_mat_2
    bot = m1 * k_mat_1 - m2 * k_mat_2
    iw = 1j / omega
    idn = np.eye(n)
    blk = np.block([
        [0.5 * (e1 + e2) * idn + top, iw * n_mat],
        [-iw * n_mat, 0.5 * (m1 + m2) * idn + bot],
    ])
    return blk


def assemble_two_layer(scene: LayeredScene):
    """Dense two-layer system and right-hand side (e1 f; m1 g)."""
    if scene.media.n_layers != 2:
        raise ValidationError("two-layer assembly requires exactly two layers")
    surf = scene.interface_surfaces()[0]
    rule = scene.rule()
    prof = scene.profile
    k1 = scene.media.wavenumber(1)
    k2 = scene.media.wavenumber(2)
    K1 = assemble_K(k1, surf, prof, rule).matrix
    K2 = assemble_K(k2, surf, prof, rule).matrix
    if scene.settings.n_difference == "regularized":
        ND = (assemble_N_regularized(k1, surf, prof, rule).matrix
              - assemble_N_regularized(k2, surf, prof, rule).matrix)
    else:
        ND = assemble_N_difference(k1, k2, surf, prof, rule).matrix
    blk = _coupled_block(K1, K2, ND, scene.media.eps, scene.media.mu,
                         scene.media.omega)
    data = boundary_data(scene.stack, _normalized_incidence(scene), [surf],
                         prof)
    rhs = np.concatenate([scene.media.eps[0] * data.f_comps[0],
                          scene.media.mu[0] * data.g_comps[0]])
    system = BlockSystem({(0, 0): blk}, [blk.shape[0]], scene,
                         meta={"kind": "two_layer"})
    return system, rhs


def _normalized_incidence(scene):
    inc = scene.incidence
    if isinstance(inc, PlaneWaveSpec):
        return inc.normalized(scene.media.wavenumber(1))
    return inc


def assemble_half_space(scene: LayeredScene, condition=None):
    """(K + I/2) system on Gamma_* with the PEC/PMC right-hand side.

    ``rhs_variant = 'derived'`` uses the Stratton-Chu assignment
    (PEC: -(i/w mu1) N(nu x E~^src); PMC: +(i/w eps1) N(nu x H~^src));
    ``'paper'`` swaps the E/H traces as printed.
    """
    obs = scene.obstacle
    if obs is None or obs.condition not in ("pec", "pmc"):
        if condition is None:
            raise ValidationError("half-space assembly requires a PEC/PMC obstacle")
    condition = condition or obs.condition
    surf = scene.half_space_surface()
    rule = scene.rule()
    prof = scene.profile
    k1 = scene.media.wavenumber(1)
    K = assemble_K(k1, surf, prof, rule).matrix
    K[np.diag_indices_from(K)] += 0.5

    inc = _normalized_incidence(scene)
    e_src, h_src = source_fields(scene.stack, inc, 1, surf.nodes_stretched,
                                 condition=condition if isinstance(inc, PlaneWaveSpec)
                                 else None)
    if isinstance(inc, DipoleSpec):
        # manufactured convention: source = -(interior dipole field) so the
        # exact scattered field is the dipole field itself
        e_src, h_src = -e_src, -h_src
    trace_e = surf.ambient_to_components(stretched_trace(surf, e_src))
    trace_h = surf.ambient_to_components(stretched_trace(surf, h_src))

    omega = scene.media.omega
    eps1, mu1 = scene.media.eps[0], scene.media.mu[0]
    variant = scene.settings.rhs_variant
    if condition == "pec":
        trace = trace_h if variant == "paper" else trace_e
        rhs = -(1j / (omega * mu1)) * apply_N_regularized(k1, surf, trace, prof, rule)
    else:
        trace = trace_e if variant == "paper" else trace_h
        rhs = (1j / (omega * eps1)) * apply_N_regularized(k1, surf, trace, prof, rule)
    system = BlockSystem({(0, 0): K}, [K.shape[0]], scene,
                         meta={"kind": f"half_space_{condition}",
                               "rhs_variant": variant,
                               "known_trace_e": trace_e,
                               "known_trace_h": trace_h,
                               "surface": surf})
    return system, rhs


def assemble_multilayer(scene: LayeredScene):
    """Block-tridiagonal system for N >= 3 penetrable layers (no obstacle)."""
    n = scene.media.n_layers
    if n < 3:
        raise ValidationError("multilayer assembly requires N >= 3 layers")
    if scene.obstacle is not None:
        raise ValidationError("multilayer scenes do not support obstacles")
    surfs = scene.interface_surfaces()
    rule = scene.rule()
    prof = scene.profile
    omega = scene.media.omega
    eps, mu = scene.media.eps, scene.media.mu
    k = [scene.media.wavenumber(j) for j in range(1, n + 1)]

    blocks = {}
    sizes = []
    for i in range(n - 1):
        surf = surfs[i]
        K_up = assemble_K(k[i], surf, prof, rule).matrix
        K_dn = assemble_K(k[i + 1], surf, prof, rule).matrix
        if scene.settings.n_difference == "regularized":
            ND = (assemble_N_regularized(k[i], surf, prof, rule).matrix
                  - assemble_N_regularized(k[i + 1], surf, prof, rule).matrix)
        else:
            ND = assemble_N_difference(k[i], k[i + 1], surf, prof, rule).matrix
        blk = _coupled_block(K_up, K_dn, ND, (eps[i], eps[i + 1]),
                             (mu[i], mu[i + 1]), omega)
        blocks[(i, i)] = blk
        sizes.append(blk.shape[0])
        iw = 1j / omega
        if i + 1 <= n - 2:
            # coupling to interface i+1 through layer i+2 kernels
            Kr = assemble_K(k[i + 1], surfs[i + 1], prof, rule,
                            tgt_surface=surf).matrix
            Nr = assemble_N_smooth(k[i + 1], surfs[i + 1], surf, prof, rule).matrix
            blocks[(i, i + 1)] = np.block([
                [eps[i + 1] * Kr, iw * Nr],
                [-iw * Nr, mu[i + 1] * Kr],
            ])
        if i - 1 >= 0:
            Kl = assemble_K(k[i], surfs[i - 1], prof, rule,
                            tgt_surface=surf).matrix
            Nl = assemble_N_smooth(k[i], surfs[i - 1], surf, prof, rule).matrix
            blocks[(i, i - 1)] = np.block([
                [-eps[i] * Kl, -iw * Nl],
                [iw * Nl, -mu[i] * Kl],
            ])

    data = boundary_data(scene.stack, _normalized_incidence(scene), surfs, prof)
    rhs = np.concatenate(
        sum(([eps[i] * data.f_comps[i], mu[i] * data.g_comps[i]]
             for i in range(n - 1)), [])
    )
    system = BlockSystem(blocks, sizes, scene, meta={"kind": "multilayer"})
    return system, rhs


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------


def gmres_solve(system, rhs, tol=1e-8, restart=200, max_iter=2000):
    """Restarted GMRES with an explicit relative-residual report.

    ``system`` may be a BlockSystem, a dense matrix, or a LinearOperator.
    """
    t0 = time.perf_counter()
    b = np.asarray(rhs, dtype=complex)
    norm_b = np.linalg.norm(b)
    if isinstance(system, BlockSystem):
        op = system.operator()
        matvec = system.matvec
    elif isinstance(system, np.ndarray):
        op = system
        matvec = lambda x: system @ x
    else:
        op = system
        matvec = system.matvec
    if norm_b == 0.0:
        report = SolveReport(0, 0.0, time.perf_counter() - t0)
        return np.zeros_like(b), report
    count = {"n": 0}

    def callback(_):
        count["n"] += 1

    x, info = spla.gmres(op, b, rtol=tol, atol=0.0, restart=restart,
                         maxiter=max_iter, callback=callback,
                         callback_type="pr_norm")
    residual = float(np.linalg.norm(matvec(x) - b) / norm_b)
    report = SolveReport(count["n"], residual, time.perf_counter() - t0)
    if info != 0 or residual > 10 * tol:
        raise IterativeSolveError(
            f"GMRES did not converge (info={info}, residual={residual:.3e})",
            report=report,
        )
    return x, report


def solve_scene(scene: LayeredScene):
    """Assemble + solve the scene; returns (solution, surfaces, report)."""
    kind = scene_kind(scene)
    if kind == "half_space":
        system, rhs = assemble_half_space(scene)
    elif kind == "two_layer":
        system, rhs = assemble_two_layer(scene)
    else:
        system, rhs = assemble_multilayer(scene)
    x, report = gmres_solve(system, rhs, tol=scene.settings.tol,
                            restart=scene.settings.restart,
                            max_iter=scene.settings.max_iter)
    report.rhs_variant = system.meta.get("rhs_variant", "")
    _density_stats(scene, system, x, report)
    return x, system, report


def scene_kind(scene):
    if scene.obstacle is not None and scene.obstacle.condition in ("pec", "pmc"):
        return "half_space"
    return "two_layer" if scene.media.n_layers == 2 else "multilayer"


def _density_stats(scene, system, x, report):
    if system.meta.get("kind", "").startswith("half_space"):
        surfaces = [system.meta["surface"]]
        per_iface = [x]
    else:
        surfaces = scene.interface_surfaces()
        off = system.offsets
        per_iface = [x[off[i]:off[i + 1]] for i in range(len(surfaces))]
    phys = pml = outer = 0.0
    for surf, sol in zip(surfaces, per_iface):
        half = sol.shape[0] // 2
        for part in (sol[:half], sol[half:]) if sol.shape[0] == 2 * surf.n_dofs \
                else [sol]:
            grid = DensityGrid(surf, part)
            phys = max(phys, grid.region_max(pml=False))
            pml = max(pml, grid.region_max(pml=True))
            outer = max(outer, grid.region_max(pml=True, outer_fraction=1.0 / 3.0))
    report.phys_max = phys
    report.pml_max = pml
    report.pml_outer_max = outer


# ---------------------------------------------------------------------------
# Field reconstruction and error metric
# ---------------------------------------------------------------------------


def _split_mj(vec):
    half = vec.shape[0] // 2
    return vec[:half], vec[half:]


def reconstruct_fields(scene, system, solution, points):
    """Scattered (E, H) at off-surface points inside the truncation box.

    Returns (E, H, layer, pml_flag); fields equal the physical scattered
    fields where pml_flag is False.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(scene.profile.contains(pts)):
        raise ValidationError("reconstruction points must lie inside B_{a,T}")
    rule = scene.rule()
    prof = scene.profile
    omega = scene.media.omega
    kind = system.meta.get("kind", "")
    e_out = np.zeros((pts.shape[0], 3), dtype=complex)
    h_out = np.zeros((pts.shape[0], 3), dtype=complex)

    if kind.startswith("half_space"):
        surf = system.meta["surface"]
        k1 = scene.media.wavenumber(1)
        eps1, mu1 = scene.media.eps[0], scene.media.mu[0]
        if kind.endswith("pec"):
            m = -system.meta["known_trace_e"]
            j = solution
        else:
            m = solution
            j = -system.meta["known_trace_h"]
        e_out = (-eval_potential("D", k1, surf, m, pts, prof, rule)
                 - (1j / (omega * eps1)) * eval_potential("S", k1, surf, j, pts,
                                                          prof, rule))
        h_out = ((1j / (omega * mu1)) * eval_potential("S", k1, surf, m, pts,
                                                       prof, rule)
                 - eval_potential("D", k1, surf, j, pts, prof, rule))
        layer = np.ones(pts.shape[0], dtype=int)
        return e_out, h_out, layer, ~scene.profile.contains_physical(pts)

    surfaces = scene.interface_surfaces()
    off = system.offsets
    layer = scene.layer_of_points(pts)
    n = scene.media.n_layers
    for j in range(1, n + 1):
        sel = layer == j
        if not np.any(sel):
            continue
        kj = scene.media.wavenumber(j)
        epsj, muj = scene.media.eps[j - 1], scene.media.mu[j - 1]
        iwe = 1j / (omega * epsj)
        iwm = 1j / (omega * muj)
        p = pts[sel]
        e = np.zeros((p.shape[0], 3), dtype=complex)
        h = np.zeros((p.shape[0], 3), dtype=complex)
        if j <= n - 1:
            m, cj = _split_mj(solution[off[j - 1]:off[j]])
            surf = surfaces[j - 1]
            e += (-eval_potential("D", kj, surf, m, p, prof, rule)
                  - iwe * eval_potential("S", kj, surf, cj, p, prof, rule))
            h += (iwm * eval_potential("S", kj, surf, m, p, prof, rule)
                  - eval_potential("D", kj, surf, cj, p, prof, rule))
        if j >= 2:
            m, cj = _split_mj(solution[off[j - 2]:off[j - 1]])
            surf = surfaces[j - 2]
            e += (eval_potential("D", kj, surf, m, p, prof, rule)
                  + iwe * eval_potential("S", kj, surf, cj, p, prof, rule))
            h += (-iwm * eval_potential("S", kj, surf, m, p, prof, rule)
                  + eval_potential("D", kj, surf, cj, p, prof, rule))
        e_out[sel] = e
        h_out[sel] = h
    return e_out, h_out, layer, ~scene.profile.contains_physical(pts)


def total_fields(scene, system, solution, points):
    """Scattered plus source fields (physical only in the physical region)."""
    e, h, layer, pml = reconstruct_fields(scene, system, solution, points)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    xt = scene.profile.stretch(pts)
    inc = _normalized_incidence(scene)
    kind = system.meta.get("kind", "")
    cond = kind.split("_")[-1] if kind.startswith("half_space") else None
    for j in np.unique(layer):
        sel = layer == j
        es, hs = source_fields(scene.stack, inc, int(j), xt[sel],
                               condition=cond if isinstance(inc, PlaneWaveSpec)
                               else None)
        if kind.startswith("half_space") and isinstance(inc, DipoleSpec):
            es, hs = -es, -hs
        alpha = scene.profile.alpha(pts[sel])
        e[sel] += alpha * es
        h[sel] += alpha * hs
    return e, h, layer, pml


def relative_max_error(numerical, reference):
    """eps_inf = max |E_num - E_ref| / max |E_ref| over a shared sample set."""
    num = np.atleast_2d(np.asarray(numerical))
    ref = np.atleast_2d(np.asarray(reference))
    if num.shape != ref.shape:
        raise ValidationError("error metric requires matching sample sets")
    denom = np.linalg.norm(ref, axis=-1).max()
    if denom == 0.0:
        raise UndefinedMetricError("reference field is identically zero")
    return float(np.linalg.norm(num - ref, axis=-1).max() / denom)
