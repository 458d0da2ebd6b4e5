"""Divergence-form spatial discretization and semi-implicit time stepping.

The generator L u = d_i(a^{ij} d_j u) + d_i(b^i u) + c u is assembled in flux
form: diffusive face values by arithmetic averaging, drift fluxes by central
averaging, and (in 2-d) mixed terms with the 4-point corner average for the
transverse gradient at a face.  With c = 0 and zero-flux walls every column
of the operator sums to zero exactly, so the discrete mass telescopes: this
property is what several acceptance checks assert at the 1e-12 level, and it
is why face averaging is arithmetic (harmonic averaging kills fluxes wherever
the diffusion degenerates).

Time stepping treats the generator with implicitness theta in [1/2, 1] and
the noise term explicitly (left-point in time):

    (I - theta dt L) u_{n+1} = u_n + (1-theta) dt L u_n + dt f_n
                               + sum_l (M^l u_n + g^l_n) dB^l_n.

The optional stability guard enforces dt sum_l ||sigma^{.l}||_inf^2 <= h^2
together with a nonnegative face margin 2a - |sigma|^2, which is exactly the
mean-square stability budget of the explicit noise term.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import csr_matrix, identity
from scipy.sparse.linalg import splu

from .errors import (ConfigurationError, SolverError, StabilityError,
                     TestFunctionError, ValidationError)
from .grids import DensityField, Grid
from .model import CoefficientSet
from .noise import BrownianPath

BOUNDARY_MASS_WARN_FRACTION = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    theta: float = 1.0
    stability_guard: bool = True
    store_every: int = 0  # 0: snapshots only; 1: keep the full step history

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if not 0.5 <= self.theta <= 1.0:
            raise ValidationError("theta must lie in [1/2, 1]")


@dataclass
class Trajectory:
    """Solution snapshots plus per-step mass and squared-norm series."""

    grid: Grid
    times: np.ndarray
    fields: list
    mass_series: np.ndarray      # one entry per step boundary, 0..n_steps
    l2_series: np.ndarray
    dt: float
    theta: float
    step_times: np.ndarray
    full_history: np.ndarray | None = None
    seed: int | None = None

    @property
    def energy_series(self) -> np.ndarray:
        return self.l2_series ** 2

    def field_at(self, t: float) -> DensityField:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigurationError(f"no snapshot at t={t}")
        return self.fields[k]


def _ghost_sign(boundary: str) -> float:
    # mirror value for zero-flux, negated mirror for a wall zero
    return 1.0 if boundary == "zero-flux" else -1.0


def assemble_generator(coeffs: CoefficientSet, grid: Grid, t: float) -> csr_matrix:
    """Flux-form sparse generator at time t."""
    pts = grid.points()
    A = coeffs.a(t, pts)
    bvec = coeffs.b(t, pts)
    cvec = coeffs.c(t, pts)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(bvec))
            and np.all(np.isfinite(cvec))):
        raise SolverError(f"non-finite generator coefficients at t={t}")
    if not np.allclose(A, np.transpose(A, (0, 2, 1)), atol=1e-13, rtol=0):
        raise ValidationError("a(t,x) sample is not symmetric")
    if grid.d == 1:
        return _assemble_1d(A[:, 0, 0], bvec[:, 0], cvec, grid)
    return _assemble_2d(A, bvec, cvec, grid)


def _assemble_1d(a, b, c, grid: Grid) -> csr_matrix:
    n = grid.n[0]
    h = grid.hs[0]
    rows, cols, vals = [], [], []

    def add(i, j, v):
        rows.append(i)
        cols.append(j)
        vals.append(v)

    af = 0.5 * (a[:-1] + a[1:])
    for k in range(n - 1):
        add(k, k, -af[k] / h**2)
        add(k, k + 1, af[k] / h**2)
        add(k + 1, k + 1, -af[k] / h**2)
        add(k + 1, k, af[k] / h**2)
        # drift flux F_{k+1/2} = (b_k u_k + b_{k+1} u_{k+1}) / 2
        add(k, k, b[k] / (2 * h))
        add(k, k + 1, b[k + 1] / (2 * h))
        add(k + 1, k, -b[k] / (2 * h))
        add(k + 1, k + 1, -b[k + 1] / (2 * h))
    if grid.boundary == "zero-value":
        # ghost = -u across the wall: diffusion doubles, drift cancels to O(h^2)
        add(0, 0, -2.0 * a[0] / h**2)
        add(n - 1, n - 1, -2.0 * a[-1] / h**2)
    for i in range(n):
        if c[i] != 0.0:
            add(i, i, c[i])
    return csr_matrix((vals, (rows, cols)), shape=(n, n))


def _assemble_2d(A, b, c, grid: Grid) -> csr_matrix:
    n1, n2 = grid.n
    h1, h2 = grid.hs
    N = n1 * n2
    sgn = _ghost_sign(grid.boundary)

    def idx(i, j):
        return i * n2 + j

    rows, cols, vals = [], [], []

    def add(r, cc, v):
        rows.append(r)
        cols.append(cc)
        vals.append(v)

    a11 = A[:, 0, 0].reshape(n1, n2)
    a22 = A[:, 1, 1].reshape(n1, n2)
    a12 = A[:, 0, 1].reshape(n1, n2)
    b1 = b[:, 0].reshape(n1, n2)
    b2 = b[:, 1].reshape(n1, n2)

    def corner_avg_terms(i, j, axis):
        """Transverse-gradient stencil at the face (i+1/2, j) (axis 0) or
        (i, j+1/2) (axis 1), with ghost mirroring at the box walls."""
        out = []
        if axis == 0:
            hT, nT = h2, n2
            cells = ((i, j), (i + 1, j))
            plus = [(ci, cj + 1) for ci, cj in cells]
            minus = [(ci, cj - 1) for ci, cj in cells]
        else:
            hT, nT = h1, n1
            cells = ((i, j), (i, j + 1))
            plus = [(ci + 1, cj) for ci, cj in cells]
            minus = [(ci - 1, cj) for ci, cj in cells]
        for (pi, pj), (ci, cj) in zip(plus, cells):
            tr = pi if axis == 1 else pj
            if 0 <= tr < nT:
                out.append((idx(pi, pj), 1.0 / (4 * hT)))
            else:
                out.append((idx(ci, cj), sgn / (4 * hT)))
        for (mi, mj), (ci, cj) in zip(minus, cells):
            tr = mi if axis == 1 else mj
            if 0 <= tr < nT:
                out.append((idx(mi, mj), -1.0 / (4 * hT)))
            else:
                out.append((idx(ci, cj), -sgn / (4 * hT)))
        return out

    # axis-0 faces
    for i in range(n1 - 1):
        for j in range(n2):
            r0, r1 = idx(i, j), idx(i + 1, j)
            af = 0.5 * (a11[i, j] + a11[i + 1, j])
            add(r0, r0, -af / h1**2)
            add(r0, r1, af / h1**2)
            add(r1, r1, -af / h1**2)
            add(r1, r0, af / h1**2)
            add(r0, r0, b1[i, j] / (2 * h1))
            add(r0, r1, b1[i + 1, j] / (2 * h1))
            add(r1, r0, -b1[i, j] / (2 * h1))
            add(r1, r1, -b1[i + 1, j] / (2 * h1))
            cf = 0.5 * (a12[i, j] + a12[i + 1, j])
            if cf != 0.0:
                for col, w in corner_avg_terms(i, j, axis=0):
                    add(r0, col, cf * w / h1)
                    add(r1, col, -cf * w / h1)
    # axis-1 faces
    for i in range(n1):
        for j in range(n2 - 1):
            r0, r1 = idx(i, j), idx(i, j + 1)
            af = 0.5 * (a22[i, j] + a22[i, j + 1])
            add(r0, r0, -af / h2**2)
            add(r0, r1, af / h2**2)
            add(r1, r1, -af / h2**2)
            add(r1, r0, af / h2**2)
            add(r0, r0, b2[i, j] / (2 * h2))
            add(r0, r1, b2[i, j + 1] / (2 * h2))
            add(r1, r0, -b2[i, j] / (2 * h2))
            add(r1, r1, -b2[i, j + 1] / (2 * h2))
            cf = 0.5 * (a12[i, j] + a12[i, j + 1])
            if cf != 0.0:
                for col, w in corner_avg_terms(i, j, axis=1):
                    add(r0, col, cf * w / h2)
                    add(r1, col, -cf * w / h2)
    if grid.boundary == "zero-value":
        for j in range(n2):
            add(idx(0, j), idx(0, j), -2 * a11[0, j] / h1**2)
            add(idx(n1 - 1, j), idx(n1 - 1, j), -2 * a11[n1 - 1, j] / h1**2)
        for i in range(n1):
            add(idx(i, 0), idx(i, 0), -2 * a22[i, 0] / h2**2)
            add(idx(i, n2 - 1), idx(i, n2 - 1), -2 * a22[i, n2 - 1] / h2**2)
    cflat = np.asarray(c, float).ravel()
    for r in np.nonzero(cflat)[0]:
        add(int(r), int(r), cflat[r])
    return csr_matrix((vals, (rows, cols)), shape=(N, N))


def assemble_noise_op(coeffs: CoefficientSet, grid: Grid, t: float, l: int) -> csr_matrix:
    """M^l u = sigma^{il} d_i u + h^l u with central differences."""
    if not 0 <= l < coeffs.L:
        raise ConfigurationError(f"driver index {l} outside [0, {coeffs.L})")
    pts = grid.points()
    S = coeffs.sigma(t, pts)[:, :, l]
    hv = coeffs.h(t, pts)[:, l]
    sgn = _ghost_sign(grid.boundary)
    rows, cols, vals = [], [], []

    def add(i, j, v):
        if v != 0.0:
            rows.append(i)
            cols.append(j)
            vals.append(v)

    if grid.d == 1:
        n = grid.n[0]
        h = grid.hs[0]
        s = S[:, 0]
        for i in range(n):
            ip, im = i + 1, i - 1
            if ip < n:
                add(i, ip, s[i] / (2 * h))
            else:
                add(i, i, sgn * s[i] / (2 * h))
            if im >= 0:
                add(i, im, -s[i] / (2 * h))
            else:
                add(i, i, -sgn * s[i] / (2 * h))
            add(i, i, hv[i])
        return csr_matrix((vals, (rows, cols)), shape=(n, n))

    n1, n2 = grid.n
    h1, h2 = grid.hs
    s1 = S[:, 0].reshape(n1, n2)
    s2 = S[:, 1].reshape(n1, n2)
    hv2 = hv.reshape(n1, n2)

    def idx(i, j):
        return i * n2 + j

    for i in range(n1):
        for j in range(n2):
            r = idx(i, j)
            if i + 1 < n1:
                add(r, idx(i + 1, j), s1[i, j] / (2 * h1))
            else:
                add(r, r, sgn * s1[i, j] / (2 * h1))
            if i - 1 >= 0:
                add(r, idx(i - 1, j), -s1[i, j] / (2 * h1))
            else:
                add(r, r, -sgn * s1[i, j] / (2 * h1))
            if j + 1 < n2:
                add(r, idx(i, j + 1), s2[i, j] / (2 * h2))
            else:
                add(r, r, sgn * s2[i, j] / (2 * h2))
            if j - 1 >= 0:
                add(r, idx(i, j - 1), -s2[i, j] / (2 * h2))
            else:
                add(r, r, -sgn * s2[i, j] / (2 * h2))
            add(r, r, hv2[i, j])
    return csr_matrix((vals, (rows, cols)), shape=(n1 * n2, n1 * n2))


def check_stability(coeffs: CoefficientSet, grid: Grid, t: float, dt: float):
    """Explicit-noise mean-square budget and discrete degeneracy margin."""
    pts = grid.points()
    S = coeffs.sigma(t, pts)
    A = coeffs.a(t, pts)
    hmin = min(grid.hs)
    sig_sq = float(np.max(np.sum(S**2, axis=(1, 2)))) if S.size else 0.0
    if sig_sq > 0 and dt * sig_sq / hmin**2 > 1.0 + 1e-12:
        raise StabilityError(
            f"dt={dt} violates the noise stability budget",
            suggested_dt=0.95 * hmin**2 / sig_sq)
    # face margin along each axis: 2 a_face - |sigma_face|^2 >= -1e-12
    if grid.d == 1:
        a = A[:, 0, 0]
        s2 = np.sum(S[:, 0, :] ** 2, axis=1)
        margin = 2 * 0.5 * (a[:-1] + a[1:]) - 0.5 * (s2[:-1] + s2[1:])
        if margin.size and margin.min() < -1e-12:
            raise StabilityError(
                f"degeneracy margin 2a - |sigma|^2 = {margin.min():.3e} < 0 at faces")
    else:
        diag = np.einsum("mii->mi", A)
        s2 = np.sum(S**2, axis=2)
        margin = 2 * diag - s2
        if margin.min() < -1e-12:
            raise StabilityError(
                f"degeneracy margin 2a - |sigma|^2 = {margin.min():.3e} < 0")


class _ImplicitSystem:
    """Cached factorization of I - theta dt L (banded in 1-d, LU in 2-d)."""

    def __init__(self, Lop: csr_matrix, dt: float, theta: float, grid: Grid):
        self.Lop = Lop
        M = (identity(Lop.shape[0], format="csr") - theta * dt * Lop).tocsc()
        if grid.d == 1:
            n = Lop.shape[0]
            ab = np.zeros((3, n))
            ab[0, 1:] = M.diagonal(1)
            ab[1, :] = M.diagonal(0)
            ab[2, :-1] = M.diagonal(-1)
            # flux-form 1-d operators are tridiagonal by construction
            if abs(M - _tridiag_from_ab(ab)).max() > 0:
                self._solve = splu(M).solve
            else:
                self._solve = lambda r: solve_banded((1, 1), ab, r)
        else:
            self._solve = splu(M).solve

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = self._solve(rhs)
        if not np.all(np.isfinite(out)):
            raise SolverError("implicit solve produced non-finite values")
        return out


def _tridiag_from_ab(ab):
    from scipy.sparse import diags
    return diags([ab[2, :-1], ab[1], ab[0, 1:]], [-1, 0, 1], format="csc")


def implicit_system(Lop: csr_matrix, dt: float, theta: float, grid: Grid) -> _ImplicitSystem:
    return _ImplicitSystem(Lop, dt, theta, grid)


def step(u: DensityField, t: float, cfg: SolverConfig, dB: np.ndarray,
         coeffs: CoefficientSet) -> DensityField:
    """One semi-implicit step from time t using driver increments dB."""
    dB = np.atleast_1d(np.asarray(dB, float))
    if dB.shape[0] != coeffs.L:
        raise ConfigurationError(f"need {coeffs.L} driver increments, got {dB.shape[0]}")
    grid = u.grid
    if cfg.stability_guard:
        check_stability(coeffs, grid, t, cfg.dt)
    t_mid = t + 0.5 * cfg.dt
    Lop = assemble_generator(coeffs, grid, t_mid)
    sys_ = _ImplicitSystem(Lop, cfg.dt, cfg.theta, grid)
    rhs = _explicit_rhs(u.values, t, t_mid, cfg, dB, coeffs, grid, Lop)
    vals = sys_.solve(rhs)
    return DensityField(grid=grid, values=vals, time_index=u.time_index + 1)


def _explicit_rhs(uvals, t, t_mid, cfg, dB, coeffs, grid, Lop, noise_ops=None):
    pts = grid.points()
    rhs = uvals.copy()
    if cfg.theta < 1.0:
        rhs += (1.0 - cfg.theta) * cfg.dt * (Lop @ uvals)
    fv = coeffs.f(t_mid, pts)
    if np.any(fv):
        rhs += cfg.dt * fv
    gv = coeffs.g(t, pts)
    for l in range(coeffs.L):
        if dB[l] == 0.0:
            continue
        Ml = noise_ops[l] if noise_ops is not None else assemble_noise_op(coeffs, grid, t, l)
        rhs += (Ml @ uvals + gv[:, l]) * dB[l]
    return rhs


def solve(coeffs: CoefficientSet, u0, grid: Grid, cfg: SolverConfig,
          path: BrownianPath, output_times) -> Trajectory:
    """March the scheme along the driver path and record snapshots."""
    if isinstance(u0, DensityField):
        u = u0.values.copy()
    else:
        u = np.asarray(u0, float).ravel().copy()
        if u.shape[0] != grid.npts:
            raise ConfigurationError("u0 does not match the grid")
    if abs(path.dt - cfg.dt) > 1e-12 * max(path.dt, cfg.dt):
        raise ConfigurationError(f"path.dt={path.dt} differs from cfg.dt={cfg.dt}")
    output_times = sorted(float(t) for t in output_times)
    t_end = output_times[-1]
    n_steps = int(round(t_end / cfg.dt))
    if abs(n_steps * cfg.dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ConfigurationError("t_end must be a multiple of dt")
    if path.n_steps < n_steps:
        raise ConfigurationError("driver path is shorter than the requested horizon")
    if path.L != coeffs.L:
        raise ConfigurationError(f"path has {path.L} drivers, coefficients need {coeffs.L}")
    snap_steps = {}
    for t in output_times:
        k = int(round(t / cfg.dt))
        if abs(k * cfg.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigurationError(f"output time {t} is not a step boundary")
        snap_steps[k] = t

    static = not coeffs.time_dependent
    if cfg.stability_guard:
        check_stability(coeffs, grid, 0.0, cfg.dt)
    sys_ = None
    noise_ops = None
    if static:
        Lop = assemble_generator(coeffs, grid, 0.5 * cfg.dt)
        sys_ = _ImplicitSystem(Lop, cfg.dt, cfg.theta, grid)
        noise_ops = [assemble_noise_op(coeffs, grid, 0.0, l) for l in range(coeffs.L)]

    mass = np.empty(n_steps + 1)
    l2 = np.empty(n_steps + 1)
    vol = grid.cell_volume
    mass[0] = math.fsum(u) * vol
    l2[0] = math.sqrt(math.fsum(u * u) * vol)
    fields = []
    history = np.empty((n_steps + 1, grid.npts)) if cfg.store_every == 1 else None
    if history is not None:
        history[0] = u
    if 0 in snap_steps:
        fields.append(DensityField(grid=grid, values=u.copy(), time_index=0))

    for n in range(n_steps):
        t = n * cfg.dt
        t_mid = t + 0.5 * cfg.dt
        if static:
            Lop_n, sys_n, ops_n = Lop, sys_, noise_ops
        else:
            if cfg.stability_guard:
                check_stability(coeffs, grid, t, cfg.dt)
            Lop_n = assemble_generator(coeffs, grid, t_mid)
            sys_n = _ImplicitSystem(Lop_n, cfg.dt, cfg.theta, grid)
            ops_n = [assemble_noise_op(coeffs, grid, t, l) for l in range(coeffs.L)]
        rhs = _explicit_rhs(u, t, t_mid, cfg, path.increments[n], coeffs, grid,
                            Lop_n, noise_ops=ops_n)
        u = sys_n.solve(rhs)
        mass[n + 1] = math.fsum(u) * vol
        l2[n + 1] = math.sqrt(math.fsum(u * u) * vol)
        if history is not None:
            history[n + 1] = u
        if n + 1 in snap_steps:
            fields.append(DensityField(grid=grid, values=u.copy(), time_index=n + 1))

    _boundary_mass_guard(grid, u)
    return Trajectory(grid=grid, times=np.asarray(output_times), fields=fields,
                      mass_series=mass, l2_series=l2, dt=cfg.dt, theta=cfg.theta,
                      step_times=np.arange(n_steps + 1) * cfg.dt,
                      full_history=history, seed=path.seed)


def _boundary_mass_guard(grid: Grid, u: np.ndarray):
    total = np.sum(np.abs(u))
    if total == 0.0:
        return
    if grid.d == 1:
        edge = abs(u[0]) + abs(u[-1])
    else:
        arr = np.abs(u.reshape(grid.n))
        edge = arr[0, :].sum() + arr[-1, :].sum() + arr[:, 0].sum() + arr[:, -1].sum()
    if edge / total > BOUNDARY_MASS_WARN_FRACTION:
        warnings.warn(
            f"boundary cells hold {edge / total:.2e} of the mass; "
            "the box is too small for this scenario", stacklevel=2)


# -- weak-form residual ----------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Analytic test function: gaussian or compactly supported bump."""

    __test__ = False  # not a pytest case, despite the name

    kind: str
    center: tuple
    width: float

    @classmethod
    def gaussian(cls, center, width):
        c = tuple(np.atleast_1d(np.asarray(center, float)))
        return cls("gaussian", c, float(width))

    @classmethod
    def bump(cls, center, width):
        c = tuple(np.atleast_1d(np.asarray(center, float)))
        return cls("bump", c, float(width))

    @property
    def support_radius(self) -> float:
        return self.width if self.kind == "bump" else 8.5 * self.width

    def value(self, X):
        s = self._s(X)
        if self.kind == "gaussian":
            return np.exp(-0.5 * s)
        out = np.zeros(s.shape)
        inside = s < 1.0
        out[inside] = np.exp(-s[inside] / (1.0 - s[inside]))
        return out

    def grad(self, X):
        X = np.asarray(X, float)
        diff = X - np.asarray(self.center)
        s = self._s(X)
        if self.kind == "gaussian":
            return -diff / self.width**2 * np.exp(-0.5 * s)[:, None]
        out = np.zeros_like(diff)
        inside = s < 1.0
        phi = np.exp(-s[inside] / (1.0 - s[inside]))
        dphi_ds = -phi / (1.0 - s[inside]) ** 2
        out[inside] = dphi_ds[:, None] * 2.0 * diff[inside] / self.width**2
        return out

    def hess(self, X):
        X = np.asarray(X, float)
        m, d = X.shape
        diff = X - np.asarray(self.center)
        s = self._s(X)
        out = np.zeros((m, d, d))
        eye = np.eye(d)
        if self.kind == "gaussian":
            phi = np.exp(-0.5 * s)
            out = (np.einsum("mi,mj->mij", diff, diff) / self.width**4
                   - eye[None, :, :] / self.width**2) * phi[:, None, None]
            return out
        inside = s < 1.0
        si = s[inside]
        phi = np.exp(-si / (1.0 - si))
        d1 = -phi / (1.0 - si) ** 2                       # d phi / d s
        d2 = phi / (1.0 - si) ** 4 - 2.0 * phi / (1.0 - si) ** 3
        ds = 2.0 * diff[inside] / self.width**2           # grad s
        out[inside] = (np.einsum("m,mi,mj->mij", d2, ds, ds)
                       + np.einsum("m,ij->mij", d1, 2.0 * eye / self.width**2))
        return out

    def _s(self, X):
        X = np.asarray(X, float)
        diff = X - np.asarray(self.center)
        return np.sum(diff**2, axis=1) / self.width**2


def default_test_functions(grid: Grid):
    span = min(hi - lo for lo, hi in zip(grid.x_min, grid.x_max))
    c = tuple((lo + hi) / 2 for lo, hi in zip(grid.x_min, grid.x_max))
    w = span / 12.0
    off = tuple(ci + span / 8.0 for ci in c)
    return [TestFunction.gaussian(c, w), TestFunction.bump(off, 3.0 * w)]


def weak_residual(traj: Trajectory, phi: TestFunction, coeffs: CoefficientSet,
                  path: BrownianPath) -> float:
    """Defect of the weak identity along the trajectory.

    Uses the analytic adjoints forced by <L u, phi> = <u, L* phi>:

        L* phi   = d_i(a^{ij} d_j phi) - b^i d_i phi + c phi,
        M^{l*} phi = -d_i(sigma^{il} phi) + h^l phi,

    grid quadrature in space and left-point sums in time; returns the worst
    absolute defect over the snapshot times normalized by sup_t |int u_t phi|
    plus one.  A deliberately sign-flipped drift must blow this up by an
    order of magnitude (negative control in the test suite).
    """
    if traj.full_history is None:
        raise ConfigurationError("weak_residual needs a store_every=1 trajectory")
    grid = traj.grid
    for lo, hi, ci in zip(grid.x_min, grid.x_max, phi.center):
        if ci - phi.support_radius <= lo or ci + phi.support_radius >= hi:
            raise TestFunctionError("test function support touches the boundary")
    pts = grid.points()
    vol = grid.cell_volume
    phiv = phi.value(pts)
    gphi = phi.grad(pts)
    hphi = phi.hess(pts)
    hist = traj.full_history
    n_steps = hist.shape[0] - 1
    dt = traj.dt

    static = not coeffs.time_dependent
    lstar = mstar = None

    def adjoints(t):
        A = coeffs.a(t, pts)
        da = coeffs.da(t, pts)
        bv = coeffs.b(t, pts)
        cv = coeffs.c(t, pts)
        S = coeffs.sigma(t, pts)
        dS = coeffs.div_sigma(t, pts)
        hv = coeffs.h(t, pts)
        ls = (np.einsum("mi,mi->m", da, gphi)
              + np.einsum("mij,mij->m", A, hphi)
              - np.einsum("mi,mi->m", bv, gphi) + cv * phiv)
        ms = (-dS * phiv[:, None] - np.einsum("mil,mi->ml", S, gphi)
              + hv * phiv[:, None])
        return ls, ms

    lhs0 = float(hist[0] @ phiv) * vol
    acc = 0.0
    snap_defects = []
    snap_steps = set(int(round(t / dt)) for t in traj.times)
    obs = {}
    for n in range(n_steps + 1):
        if n in snap_steps:
            lhs = float(hist[n] @ phiv) * vol
            obs[n] = lhs
            snap_defects.append(abs(lhs - (lhs0 + acc)))
        if n == n_steps:
            break
        t = n * dt
        if static:
            if lstar is None:
                lstar, mstar = adjoints(0.0)
            ls, ms = lstar, mstar
        else:
            ls, ms = adjoints(t)
        u_n = hist[n]
        fv = coeffs.f(t, pts)
        gv = coeffs.g(t, pts)
        acc += dt * float(u_n @ ls) * vol + dt * float(fv @ phiv) * vol
        for l in range(coeffs.L):
            dB = path.increments[n, l]
            if dB != 0.0:
                acc += float(u_n @ ms[:, l]) * vol * dB
                acc += float(gv[:, l] @ phiv) * vol * dB
    denom = max(abs(v) for v in obs.values()) + 1.0
    return max(snap_defects) / denom
