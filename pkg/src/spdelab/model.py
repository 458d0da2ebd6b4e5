"""Coefficient data model for the drift-diffusion operator and its noise
operators, plus the parabolicity and factorization predicates.

The generator acts in divergence form,

    L u = d_i(a^{ij} d_j u) + d_i(b^i u) + c u,

and each noise operator is first order,

    M^l u = sigma^{il} d_i u + h^l u,      l = 0..L-1.

The central quadratic form is

    defect(t, x, xi) = 2 xi'a xi - sum_l (sigma' xi)_l^2,

which must dominate kappa(x)|xi|^2 for the estimates downstream to hold;
``verify_parabolicity`` samples it over grid x directions and reports the
exact minimum over the sampled set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EvaluationError, ValidationError
from .families import ScalarField
from .grids import Grid

SIGMA_HAT_RTOL = 1e-12
PARABOLIC_TOL = 1e-12
_FD_STEP = 1e-3  # 4th-order central differences for missing derivative hooks


def _fd_grad(fn, t, x, dim):
    """4th-order central difference gradient of a scalar-valued field callable."""
    g = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = _FD_STEP
        g.append((fn(t, x - 2 * e) - 8 * fn(t, x - e)
                  + 8 * fn(t, x + e) - fn(t, x + 2 * e)) / (12 * _FD_STEP))
    return np.stack(g, axis=-1)


class CoefficientSet:
    """Immutable bundle of coefficient/source callables with fixed shapes.

    Every callable takes ``(t, x)`` with ``x`` of shape (m, d) and returns:

        a -> (m, d, d)    b -> (m, d)    c -> (m,)
        sigma -> (m, d, L)    h -> (m, L)
        f -> (m,)    g -> (m, L)    sigma_hat -> (m, d, L') (optional)

    Derivative hooks (``da`` = d_j a^{ij} as (m, d), ``div_b`` as (m,),
    ``div_sigma`` = d_i sigma^{il} as (m, L), ``grad_h`` as (m, d, L)) default
    to 4th-order central differences of the primary callables.
    """

    def __init__(self, d, L, a, b, c, sigma, h, f, g, sigma_hat=None,
                 da=None, div_b=None, div_sigma=None, grad_h=None,
                 time_dependent=False, label=""):
        self.d = int(d)
        self.L = int(L)
        self.a, self.b, self.c = a, b, c
        self.sigma, self.h = sigma, h
        self.f, self.g = f, g
        self.sigma_hat = sigma_hat
        self.time_dependent = bool(time_dependent)
        self.label = label
        self.da = da or (lambda t, x: self._fd_da(t, x))
        self.div_b = div_b or (lambda t, x: self._fd_div_b(t, x))
        self.div_sigma = div_sigma or (lambda t, x: self._fd_div_sigma(t, x))
        self.grad_h = grad_h or (lambda t, x: self._fd_grad_h(t, x))

    # fallback finite-difference derivative hooks
    def _fd_da(self, t, x):
        cols = [_fd_grad(lambda tt, xx, j=j: self.a(tt, xx)[:, :, j], t, x, self.d)
                for j in range(self.d)]
        # cols[j][:, i, k] = d_k a^{ij}; want sum_j d_j a^{ij}
        return sum(cols[j][:, :, j] for j in range(self.d))

    def _fd_div_b(self, t, x):
        g = _fd_grad(lambda tt, xx: self.b(tt, xx), t, x, self.d)  # (m, d_comp, d_dir)
        return np.einsum("mii->m", g)

    def _fd_div_sigma(self, t, x):
        g = _fd_grad(lambda tt, xx: self.sigma(tt, xx), t, x, self.d)  # (m, d, L, d)
        return np.einsum("mili->ml", g)

    def _fd_grad_h(self, t, x):
        g = _fd_grad(lambda tt, xx: self.h(tt, xx), t, x, self.d)  # (m, L, d)
        return np.transpose(g, (0, 2, 1))

    def validate(self, grid: Grid, times) -> None:
        """Run the structural invariants on grid x times samples."""
        X = grid.points()
        for t in times:
            names = [("a", self.a(t, X)), ("b", self.b(t, X)), ("c", self.c(t, X)),
                     ("sigma", self.sigma(t, X)), ("h", self.h(t, X)),
                     ("f", self.f(t, X)), ("g", self.g(t, X))]
            if self.sigma_hat is not None:
                names.append(("sigma_hat", self.sigma_hat(t, X)))
            for name, arr in names:
                if not np.all(np.isfinite(arr)):
                    raise EvaluationError(f"field '{name}' is non-finite at t={t}")
            A = dict(names)["a"]
            if not np.allclose(A, np.transpose(A, (0, 2, 1)), rtol=0, atol=1e-14):
                raise ValidationError("a(t,x) must be symmetric at all sampled points")
            if self.sigma_hat is not None:
                S = dict(names)["sigma_hat"]
                AA = np.einsum("mik,mjk->mij", S, S)  # sigma_hat sigma_hat^T
                scale = np.maximum(np.max(np.abs(A)), 1e-300)
                if np.max(np.abs(AA - A)) > SIGMA_HAT_RTOL * scale:
                    raise ValidationError(
                        "sigma_hat inconsistent: a != sigma_hat sigma_hat^T "
                        f"(max deviation {np.max(np.abs(AA - A)):.3e})")

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_fields(cls, d=1, L=1, a=None, b=None, c=None, sigma=None, h=None,
                    f=None, g=None, sigma_hat=None, label=""):
        """Build from ScalarFields (or plain numbers for constants).

        For d = 1, ``a``..``g`` are single fields and ``sigma``/``h``/``g``
        may be lists over the driver index.  For d = 2, ``a`` is given as
        (a11, a12, a22), ``b`` as (b1, b2), and each sigma^l as a pair.
        """
        def F(v, default=0.0):
            if v is None:
                v = default
            if isinstance(v, ScalarField):
                return v
            return ScalarField("constant", d, value=float(v))

        def per_driver(v):
            if v is None:
                return [F(0.0) for _ in range(L)]
            if not isinstance(v, (list, tuple)):
                v = [v]
            out = list(v) + [0.0] * (L - len(v))
            return [F(t) for t in out[:L]]

        if d == 1:
            a_f = [[F(a)]]
            b_f = [F(b)]
            sig_f = [[fld] for fld in per_driver(sigma)]       # [l][i]
            shat_f = None if sigma_hat is None else [[fld] for fld in per_driver(sigma_hat)]
        else:
            a11, a12, a22 = (F(t) for t in (a or (0.0, 0.0, 0.0)))
            a_f = [[a11, a12], [a12, a22]]
            b_f = [F(t) for t in (b or (0.0, 0.0))]
            sig_raw = sigma or []
            sig_f = [[F(ci) for ci in pair] for pair in sig_raw]
            sig_f += [[F(0.0), F(0.0)] for _ in range(L - len(sig_f))]
            shat_f = None
            if sigma_hat is not None:
                shat_f = [[F(ci) for ci in pair] for pair in sigma_hat]
        c_f, f_f = F(c), F(f)
        h_f = per_driver(h)
        g_f = per_driver(g)

        def a_fn(t, x):
            m = x.shape[0]
            out = np.empty((m, d, d))
            for i in range(d):
                for j in range(d):
                    out[:, i, j] = a_f[i][j](x)
            return out

        def da_fn(t, x):
            m = x.shape[0]
            out = np.zeros((m, d))
            for i in range(d):
                for j in range(d):
                    out[:, i] += a_f[i][j].grad(x)[:, j]
            return out

        def b_fn(t, x):
            return np.stack([fld(x) for fld in b_f], axis=1)

        def div_b_fn(t, x):
            return sum(b_f[i].grad(x)[:, i] for i in range(d))

        def sigma_fn(t, x):
            m = x.shape[0]
            out = np.zeros((m, d, L))
            for l, comps in enumerate(sig_f):
                for i in range(d):
                    out[:, i, l] = comps[i](x)
            return out

        def div_sigma_fn(t, x):
            m = x.shape[0]
            out = np.zeros((m, L))
            for l, comps in enumerate(sig_f):
                for i in range(d):
                    out[:, l] += comps[i].grad(x)[:, i]
            return out

        def h_fn(t, x):
            return np.stack([fld(x) for fld in h_f], axis=1)

        def grad_h_fn(t, x):
            return np.stack([fld.grad(x) for fld in h_f], axis=2)

        def c_fn(t, x):
            return c_f(x)

        def f_fn(t, x):
            return f_f(x)

        def g_fn(t, x):
            return np.stack([fld(x) for fld in g_f], axis=1)

        shat_fn = None
        if shat_f is not None:
            def shat_fn(t, x):
                m = x.shape[0]
                Lp = len(shat_f)
                out = np.zeros((m, d, Lp))
                for l, comps in enumerate(shat_f):
                    for i in range(d):
                        out[:, i, l] = comps[i](x)
                return out

        obj = cls(d, L, a_fn, b_fn, c_fn, sigma_fn, h_fn, f_fn, g_fn,
                  sigma_hat=shat_fn, da=da_fn, div_b=div_b_fn,
                  div_sigma=div_sigma_fn, grad_h=grad_h_fn,
                  time_dependent=False, label=label)
        obj.fields = {"a": a_f, "b": b_f, "c": c_f, "sigma": sig_f, "h": h_f,
                      "f": f_f, "g": g_f, "sigma_hat": shat_f}
        return obj


# -- parabolicity ---------------------------------------------------------

@dataclass
class ParabolicityReport:
    """Outcome of sampling the parabolic quadratic form.

    ``min_defect`` is the exact minimum over the sampled (t, x, xi) set of
    defect(t,x,xi) - kappa(x) (unit directions), ``kappa_floor`` the smallest
    sampled kappa, and ``witnesses`` the worst few sample points.
    """

    min_defect: float
    kappa_floor: float
    alpha: float | None = None
    witnesses: list = field(default_factory=list)
    n_sampled: int = 0
    tol: float = PARABOLIC_TOL

    @property
    def passes(self) -> bool:
        return self.min_defect >= -self.tol


def parabolic_defect(coeffs: CoefficientSet, t: float, x, xi) -> float:
    """Evaluate 2 xi'a xi - sum_l (sigma'xi)_l^2 at a single (t, x)."""
    xi = np.asarray(xi, dtype=float).ravel()
    if xi.shape[0] != coeffs.d or not np.any(xi):
        raise ConfigurationError("xi must be a nonzero d-vector")
    X = np.asarray(x, dtype=float).reshape(1, coeffs.d)
    A = coeffs.a(t, X)[0]
    S = coeffs.sigma(t, X)[0]
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(S))):
        bad = "a" if not np.all(np.isfinite(A)) else "sigma"
        raise EvaluationError(f"field '{bad}' is non-finite at t={t}, x={x}")
    return float(2.0 * xi @ A @ xi - np.sum((S.T @ xi) ** 2))


def direction_set(d: int, n_dirs: int, seed: int = 0) -> np.ndarray:
    """d axis directions plus seeded uniform sphere samples, shape (n_dirs, d)."""
    if n_dirs < 2 * d:
        raise ConfigurationError(f"n_dirs must be >= {2 * d}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    dirs = [np.eye(d)]
    extra = rng.standard_normal((n_dirs - d, d))
    norms = np.linalg.norm(extra, axis=1)
    # resampling for degenerate draws is astronomically unlikely; just guard
    extra = extra[norms > 1e-12] / norms[norms > 1e-12, None]
    dirs.append(extra)
    return np.concatenate(dirs, axis=0)


def _kappa_values(kappa, X):
    if kappa is None:
        return np.zeros(X.shape[0])
    if np.isscalar(kappa):
        return np.full(X.shape[0], float(kappa))
    if isinstance(kappa, ScalarField):
        return kappa(X)
    return np.asarray(kappa(X), dtype=float)


def verify_parabolicity(coeffs: CoefficientSet, grid: Grid, times, kappa=0.0,
                        n_dirs: int = 8, seed: int = 0,
                        alpha: float | None = None) -> ParabolicityReport:
    """Sample defect - kappa over grid points, times and unit directions.

    Passes when the sampled minimum is >= -1e-12.  Directions are the d axes
    plus seeded sphere samples so reruns are reproducible.
    """
    times = list(times)
    if grid.npts == 0 or not times:
        raise ConfigurationError("verify_parabolicity needs a nonempty grid and times")
    dirs = direction_set(coeffs.d, n_dirs, seed)
    X = grid.points()
    kap = _kappa_values(kappa, X)
    best = []
    n_sampled = 0
    for t in times:
        A = coeffs.a(t, X)
        S = coeffs.sigma(t, X)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(S))):
            bad = "a" if not np.all(np.isfinite(A)) else "sigma"
            raise EvaluationError(f"field '{bad}' is non-finite at t={t}")
        for xi in dirs:
            quad = 2.0 * np.einsum("mij,i,j->m", A, xi, xi)
            noise = np.sum(np.einsum("mil,i->ml", S, xi) ** 2, axis=1)
            vals = quad - noise - kap
            i = int(np.argmin(vals))
            best.append((float(vals[i]), t, tuple(X[i]), tuple(xi)))
            n_sampled += X.shape[0]
    best.sort(key=lambda r: r[0])
    witnesses = [(t, x, xi, v) for v, t, x, xi in best[:3]]
    return ParabolicityReport(min_defect=best[0][0], kappa_floor=float(np.min(kap)),
                              alpha=alpha, witnesses=witnesses, n_sampled=n_sampled)


def coercivity_constant(alpha: float) -> float:
    """Coercivity constant (2 alpha - 1)/(1 + alpha) of the factorized bound."""
    if alpha <= 0.5:
        raise ConfigurationError("alpha must exceed 1/2")
    return (2.0 * alpha - 1.0) / (1.0 + alpha)


def factorized_margin(coeffs: CoefficientSet, alpha: float, t: float, x, xi) -> float:
    """|sigma_hat' xi|^2 - alpha |sigma' xi|^2 at one point (>= 0 wanted)."""
    if coeffs.sigma_hat is None:
        raise ConfigurationError("factorized_margin needs coeffs.sigma_hat")
    if alpha <= 0.5:
        raise ConfigurationError("alpha must exceed 1/2")
    xi = np.asarray(xi, dtype=float).ravel()
    X = np.asarray(x, dtype=float).reshape(1, coeffs.d)
    Sh = coeffs.sigma_hat(t, X)[0]
    S = coeffs.sigma(t, X)[0]
    return float(np.sum((Sh.T @ xi) ** 2) - alpha * np.sum((S.T @ xi) ** 2))
