"""Input-Hessian spectra and second-order robustness bounds.

For a classifier f with x on the negative side (c = -f(x) > 0), gradient g
and largest Hessian eigenpair (nu, u), the minimal l2 perturbation reaching
f >= 0 under an exact quadratic model is sandwiched by

    lower = (|g| / nu) (sqrt(1 + 2 nu c / |g|^2) - 1)
    upper = (|g.u| / nu) (sqrt(1 + 2 nu c / (g.u)^2) - 1)

Both are evaluated in the algebraically equivalent form 2c / (a (sqrt(1 + t) + 1)),
which is stable as nu -> 0 and tends to the linear margin c / a.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from curvlab import tensor_core as tc
from curvlab.attacks import min_l2_perturbation_bruteforce
from curvlab.errors import (
    BatchFailed,
    CurvlabError,
    DegenerateUpper,
    NegativeCurvature,
    NoConvergence,
    WrongSide,
    ZeroGradient,
)

# below this |nu| the bounds use their nu -> 0 limit
NU_FLAT = 1e-8
# an unconverged power iteration falls back to a dense solve up to this dimension
DENSE_FALLBACK_DIM = 256


@dataclass
class HessianSpectrum:
    nu: float
    u: np.ndarray
    iterations_used: int
    residual: float
    converged: bool = True


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def largest_eigenpair(hvp, dim: int, seed: int = 0, max_iter: int = 500, tol: float = 1e-6, strict: bool = False):
    """Largest algebraic eigenpair of a symmetric operator given as ``v -> Hv``.

    Phase one estimates mu = max |lambda| by plain power iteration.  Phase two
    iterates on H + (mu + 1) I, whose spectrum is shifted to be positive, so
    its dominant eigenvalue is nu + mu + 1.

    A result whose residual ||Hu - nu u|| is still above ``tol`` after
    ``max_iter`` phase-two iterations is returned with ``converged=False``,
    or raised as :class:`NoConvergence` when ``strict``.
    """
    rng = np.random.default_rng(seed)
    v = _unit(rng.standard_normal(dim))

    mu, used = 0.0, 0
    for used in range(1, max_iter + 1):
        w = np.asarray(hvp(v), dtype=np.float64)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            mu = 0.0
            break
        new_mu = norm
        v = w / norm
        if abs(new_mu - mu) <= 1e-3 * new_mu:
            mu = new_mu
            break
        mu = new_mu
    shift = mu + 1.0

    u = _unit(rng.standard_normal(dim))
    hu = np.asarray(hvp(u), dtype=np.float64)
    nu = float(u @ hu)
    residual = float(np.linalg.norm(hu - nu * u))
    it = 0
    for it in range(1, max_iter + 1):
        if residual < tol:
            break
        u = _unit(hu + shift * u)
        hu = np.asarray(hvp(u), dtype=np.float64)
        nu = float(u @ hu)
        residual = float(np.linalg.norm(hu - nu * u))
    spec = HessianSpectrum(nu=nu, u=u, iterations_used=used + it, residual=residual, converged=residual < tol)
    if strict and not spec.converged:
        raise NoConvergence(f"residual {residual:.3g} after {max_iter} iterations", spec)
    return spec


def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 100):
    """Dense symmetric eigendecomposition by cyclic Jacobi rotations.

    Returns eigenvalues in ascending order and matching column eigenvectors.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    vecs = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                vp = c * vecs[:, p] - s * vecs[:, q]
                vq = s * vecs[:, p] + c * vecs[:, q]
                vecs[:, p], vecs[:, q] = vp, vq
    vals = np.diag(a).copy()
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


# ---------------------------------------------------------------------------
# robustness bounds
# ---------------------------------------------------------------------------


def _margin_root(a: float, c: float, nu: float) -> float:
    """(a / nu)(sqrt(1 + 2 nu c / a^2) - 1), continuous at nu = 0."""
    t = 2.0 * nu * c / (a * a)
    return 2.0 * c / (a * (math.sqrt(1.0 + t) + 1.0))


def bound_values(c: float, g_norm: float, g_dot_u: float, nu: float) -> tuple[float, float]:
    """(lower, upper) from scalars; upper is inf when g.u vanishes."""
    lower = _margin_root(g_norm, c, nu)
    upper = math.inf if abs(g_dot_u) < 1e-12 else _margin_root(abs(g_dot_u), c, nu)
    return lower, upper


@dataclass
class RobustnessBounds:
    c: float
    g_norm: float
    g_dot_u: float
    nu: float
    lower: float
    upper: float
    flat: bool = False  # |nu| < NU_FLAT, so the linear-margin limit was used
    spectrum: HessianSpectrum | None = field(default=None, repr=False)


def scalar_view(f, dim: int):
    """Turn a batched classifier (n, d) -> (n,) into a scalar function of one input."""

    def fn(x):
        return tc.sum(f(tc.reshape(x, (1, dim))))

    return fn


def lemma1_bounds(f, x, seed: int = 0, max_iter: int = 500, tol: float = 1e-13) -> RobustnessBounds:
    """Lower/upper bounds on the minimal l2 flip of batched classifier ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    fn = scalar_view(f, x.size)
    value, tape = tc.forward_eval(fn, x)
    c = -float(value.data)
    if c <= 0:
        raise WrongSide(f"f(x) = {-c:.6g} is not negative")
    g = tc.gradient(tape)
    g_norm = float(np.linalg.norm(g))
    if g_norm == 0.0:
        raise ZeroGradient("gradient vanishes at x")
    hvp = lambda v: tc.hessian_vector_product(fn, x, v)  # noqa: E731
    spec = largest_eigenpair(hvp, x.size, seed=seed, max_iter=max_iter, tol=tol)
    if not spec.converged and x.size <= DENSE_FALLBACK_DIM:
        # a close second eigenvalue stalls the power method, and an
        # underestimated nu would overstate the lower bound
        spec = _dense_eigenpair(hvp, x.size, spec.iterations_used)
    nu = spec.nu
    if nu < -NU_FLAT:
        raise NegativeCurvature(f"largest Hessian eigenvalue {nu:.6g} is negative")
    flat = abs(nu) < NU_FLAT
    nu_used = max(nu, 0.0)
    g_dot_u = float(g @ spec.u)
    lower, upper = bound_values(c, g_norm, g_dot_u, nu_used)
    bounds = RobustnessBounds(c, g_norm, g_dot_u, nu, lower, upper, flat, spec)
    if math.isinf(upper):
        raise DegenerateUpper(f"|g.u| = {abs(g_dot_u):.3g} is zero; the upper bound is infinite", bounds)
    return bounds


def _dense_eigenpair(hvp, dim: int, iterations: int) -> HessianSpectrum:
    h = np.column_stack([np.asarray(hvp(e), dtype=np.float64) for e in np.eye(dim)])
    lam, vecs = jacobi_eigh(0.5 * (h + h.T))
    i = int(np.argmax(lam))
    u = vecs[:, i]
    residual = float(np.linalg.norm(h @ u - lam[i] * u))
    return HessianSpectrum(float(lam[i]), u, iterations + dim, residual, True)


@dataclass
class Quadratic:
    """f(x) = offset + b.x + 0.5 x^T A x, evaluated on (n, d) batches."""

    offset: float
    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        self.a = 0.5 * (a + a.T)

    @property
    def dim(self) -> int:
        return self.b.size

    def __call__(self, xs):
        xs = tc.as_tensor(xs)
        quad = tc.sum(tc.mul(tc.matmul(xs, self.a), xs), axis=1)
        return tc.add(tc.add(tc.matmul(xs, self.b), self.offset), tc.mul(quad, 0.5))


@dataclass
class SandwichReport:
    bounds: RobustnessBounds
    delta_norm: float
    delta: np.ndarray
    holds: bool
    slack: float = 1e-4

    @property
    def lower(self) -> float:
        return self.bounds.lower

    @property
    def upper(self) -> float:
        return self.bounds.upper


def verify_sandwich(f, x, slack: float = 1e-4, seed: int = 0, nu_floor: float | None = None) -> SandwichReport:
    """Compare the bounds against brute-force search on an exactly quadratic f.

    ``nu_floor`` replaces a computed nu below it (e.g. 1e-8 for linear f).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    try:
        bounds = lemma1_bounds(f, x, seed=seed)
    except DegenerateUpper as exc:
        bounds = exc.bounds
    if nu_floor is not None and bounds.nu < nu_floor:
        lower, upper = bound_values(bounds.c, bounds.g_norm, bounds.g_dot_u, nu_floor)
        bounds.nu, bounds.lower, bounds.upper, bounds.flat = nu_floor, lower, upper, True
    norm, delta = min_l2_perturbation_bruteforce(f, x, seed=seed)
    holds = bounds.lower - slack <= norm <= bounds.upper + slack
    if not holds:
        raise AssertionError(f"|delta*| = {norm:.6g} outside [{bounds.lower:.6g}, {bounds.upper:.6g}]")
    return SandwichReport(bounds, norm, delta, holds, slack)


def random_quadratic(rng: np.random.Generator, dim: int) -> Quadratic:
    """A quadratic with f(0) < 0 and a positive largest Hessian eigenvalue."""
    q = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    eig = rng.uniform(-2.0, 2.0, size=dim)
    eig[0] = rng.uniform(0.1, 2.0)
    a = (q * eig) @ q.T
    b = rng.standard_normal(dim)
    offset = -rng.uniform(0.2, 2.0)
    return Quadratic(offset, b, a)


# ---------------------------------------------------------------------------
# batch report over a trained model
# ---------------------------------------------------------------------------


@dataclass
class EigRow:
    example_index: int
    nu: float
    residual: float
    iterations: int
    selector: str


@dataclass
class BatchEigReport:
    rows: list[EigRow]
    failed: list[tuple[int, str]]
    selector: str

    @property
    def nus(self) -> np.ndarray:
        return np.array([r.nu for r in self.rows])

    def summary(self) -> dict:
        nus = self.nus
        return {
            "count": int(nus.size),
            "failed": len(self.failed),
            "mean": float(nus.mean()),
            "median": float(np.median(nus)),
            "max": float(nus.max()),
            "selector": self.selector,
        }


def batch_max_eig_report(
    model,
    inputs,
    labels,
    selector: str = "logit",
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
    min_success: float = 0.9,
) -> BatchEigReport:
    """Largest input-Hessian eigenvalue of the selected scalar for each example."""
    inputs = np.asarray(inputs, dtype=np.float64)
    rows, failed = [], []
    for i, (x, y) in enumerate(zip(inputs, np.asarray(labels))):
        fn = model.scalar_fn(int(y), selector)
        try:
            spec = largest_eigenpair(
                lambda v, x=x, fn=fn: tc.hessian_vector_product(fn, x, v.reshape(x.shape)).reshape(-1),
                x.size,
                seed=seed + i,
                max_iter=max_iter,
                tol=tol,
            )
        except CurvlabError as exc:
            failed.append((i, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(EigRow(i, spec.nu, spec.residual, spec.iterations_used, selector))
    if len(inputs) and len(rows) < min_success * len(inputs):
        raise BatchFailed(f"only {len(rows)}/{len(inputs)} examples produced an eigenvalue")
    return BatchEigReport(rows, failed, selector)


def write_eig_csv(report: BatchEigReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_index", "nu", "residual", "iterations", "selector"])
        for r in report.rows:
            w.writerow([r.example_index, f"{r.nu:.6g}", f"{r.residual:.6g}", r.iterations, r.selector])
    return path
