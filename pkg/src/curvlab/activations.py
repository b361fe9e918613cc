"""Activation functions with exact first/second derivatives and curvature search.

Curvature here means the maximum of the second derivative over the real
line.  For the piecewise-linear kinds (ReLU, LeakyReLU) the second
derivative does not exist at the kink, so the slope difference ``|1 - k|``
is used instead.

Every function in this module is vectorised over numpy arrays; the scalar
entry points (:func:`eval`, :func:`first_deriv`, :func:`second_deriv`) are
thin wrappers that return Python floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit, ndtr

from curvlab.errors import NonSmoothActivation, NonSmoothAtKink, ParseError, WrongKind

KINDS = ("relu", "leakyrelu", "lisht", "gelu", "mish", "silu", "pswish")
SMOOTH_KINDS = ("lisht", "gelu", "mish", "silu", "pswish")
PIECEWISE_KINDS = ("relu", "leakyrelu")

# |z| below this counts as sitting on a kink
KINK_TOL = 1e-12

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ActivationSpec:
    """Names an activation and its parameter.

    ``param`` is the negative-side slope ``k`` for ``leakyrelu`` and the
    temperature ``beta`` for ``pswish``; it is ``None`` for every other kind.
    """

    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "leakyrelu":
            if self.param is None:
                raise ValueError("leakyrelu needs a slope k")
            object.__setattr__(self, "param", float(self.param))
        elif self.kind == "pswish":
            if self.param is None or not self.param > 0:
                raise ValueError("pswish needs beta > 0")
            object.__setattr__(self, "param", float(self.param))
        elif self.param is not None:
            raise ValueError(f"{self.kind} takes no parameter")

    @property
    def smooth(self) -> bool:
        return self.kind in SMOOTH_KINDS

    @property
    def k(self) -> float:
        """Negative-side slope of a piecewise-linear kind (ReLU is k=0)."""
        if self.kind == "relu":
            return 0.0
        if self.kind == "leakyrelu":
            return self.param
        raise WrongKind(f"{self.kind} has no slope parameter")

    @property
    def beta(self) -> float:
        if self.kind == "silu":
            return 1.0
        if self.kind == "pswish":
            return self.param
        raise WrongKind(f"{self.kind} has no beta parameter")

    def __str__(self) -> str:
        if self.kind == "leakyrelu":
            return f"leakyrelu:k={self.param:g}"
        if self.kind == "pswish":
            return f"pswish:beta={self.param:g}"
        return self.kind


def parse_activation(text: str) -> ActivationSpec:
    """Parse ``relu``, ``leakyrelu:k=0.3``, ``pswish:beta=2.0`` and friends."""
    if isinstance(text, ActivationSpec):
        return text
    raw = str(text).strip().lower()
    kind, _, rest = raw.partition(":")
    kind = kind.strip()
    if kind not in KINDS:
        raise ParseError(f"unknown activation {text!r}")
    expected = {"leakyrelu": "k", "pswish": "beta"}.get(kind)
    if expected is None:
        if rest:
            raise ParseError(f"activation {kind!r} takes no parameter: {text!r}")
        return ActivationSpec(kind)
    if not rest:
        raise ParseError(f"activation {kind!r} needs {expected}=<value>: {text!r}")
    key, eq, value = rest.partition("=")
    if key.strip() != expected or not eq:
        raise ParseError(f"activation {kind!r} needs {expected}=<value>: {text!r}")
    try:
        number = float(value)
    except ValueError:
        raise ParseError(f"bad number in activation {text!r}") from None
    try:
        return ActivationSpec(kind, number)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


# ---------------------------------------------------------------------------
# vectorised value and derivatives
# ---------------------------------------------------------------------------


def value(spec: ActivationSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    kind = spec.kind
    if kind in PIECEWISE_KINDS:
        return np.where(z >= 0, z, spec.k * z)
    if kind == "lisht":
        return z * np.tanh(z)
    if kind == "gelu":
        return z * ndtr(z)
    if kind == "mish":
        return z * np.tanh(np.logaddexp(0.0, z))
    b = spec.beta
    return z * expit(b * z)


def d1(spec: ActivationSpec, z) -> np.ndarray:
    """First derivative.  Piecewise kinds take the ``x >= 0`` slope at the kink."""
    z = np.asarray(z, dtype=np.float64)
    kind = spec.kind
    if kind in PIECEWISE_KINDS:
        return np.where(z >= 0, 1.0, spec.k)
    if kind == "lisht":
        t = np.tanh(z)
        return t + z * (1.0 - t * t)
    if kind == "gelu":
        return ndtr(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    if kind == "mish":
        t = np.tanh(np.logaddexp(0.0, z))
        s = expit(z)
        return t + z * (1.0 - t * t) * s
    b = spec.beta
    s = expit(b * z)
    return s + b * z * s * (1.0 - s)


def d2(spec: ActivationSpec, z) -> np.ndarray:
    """Second derivative.

    Piecewise kinds return zeros away from the kink and raise
    :class:`NonSmoothActivation` if any entry sits on it.
    """
    z = np.asarray(z, dtype=np.float64)
    kind = spec.kind
    if kind in PIECEWISE_KINDS:
        if np.any(np.abs(z) < KINK_TOL):
            raise NonSmoothActivation(f"{spec} has no second derivative at 0")
        return np.zeros_like(z)
    if kind == "lisht":
        t = np.tanh(z)
        sech2 = 1.0 - t * t
        return 2.0 * sech2 * (1.0 - z * t)
    if kind == "gelu":
        return _INV_SQRT_2PI * np.exp(-0.5 * z * z) * (2.0 - z * z)
    if kind == "mish":
        # chain rule through tanh(softplus(z)); softplus' = s, softplus'' = s(1-s)
        t = np.tanh(np.logaddexp(0.0, z))
        s = expit(z)
        sech2 = 1.0 - t * t
        dt = sech2 * s
        ddt = sech2 * s * (1.0 - s) - 2.0 * t * sech2 * s * s
        return 2.0 * dt + z * ddt
    b = spec.beta
    s = expit(b * z)
    ds = s * (1.0 - s)
    return 2.0 * b * ds + b * b * z * ds * (1.0 - 2.0 * s)


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------


def eval(spec: ActivationSpec, x: float) -> float:  # noqa: A001 - public name
    return float(value(spec, x))


def first_deriv(spec: ActivationSpec, x: float) -> float:
    if not spec.smooth and x == 0:
        raise NonSmoothAtKink(f"{spec} is not differentiable at 0")
    return float(d1(spec, x))


def second_deriv(spec: ActivationSpec, x: float) -> float:
    if not spec.smooth:
        raise NonSmoothActivation(f"{spec} is piecewise linear; use approx_curvature")
    return float(d2(spec, x))


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvatureReport:
    spec: ActivationSpec
    max_curvature: float
    argmax_x: float
    exact: bool
    # max |f''| on the same domain; equals max_curvature for every supported kind
    max_abs_curvature: float | None = None
    domain: tuple[float, float] | None = None


def search_halfwidth(spec: ActivationSpec) -> float:
    """Half-width of the curvature search interval.

    PSwish(beta) is silu(beta x)/beta, so its second derivative decays on a
    length scale of 1/beta; small beta needs a proportionally wider window.
    """
    if spec.kind == "pswish" and spec.beta < 1.0:
        return 10.0 / spec.beta
    return 10.0


def max_curvature(spec: ActivationSpec, step: float = 1e-3, xtol: float = 1e-8) -> CurvatureReport:
    """Maximise f'' by a grid scan followed by bounded scalar refinement."""
    if not spec.smooth:
        raise NonSmoothActivation(f"{spec} is piecewise linear; use approx_curvature")
    half = search_halfwidth(spec)
    n = int(round(2 * half / step)) + 1
    grid = np.linspace(-half, half, n)
    f2 = d2(spec, grid)
    tail = max(abs(f2[0]), abs(f2[-1]))
    if tail >= 1e-3:
        raise AssertionError(f"|f''| = {tail:.3g} at the domain edge for {spec}")
    i = int(np.argmax(f2))  # first maximiser, i.e. the smallest x on ties
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, n - 1)]
    res = minimize_scalar(
        lambda t: -float(d2(spec, t)), bounds=(lo, hi), method="bounded", options={"xatol": xtol}
    )
    x_best, f_best = grid[i], f2[i]
    if -res.fun > f_best:
        x_best, f_best = float(res.x), float(-res.fun)
    return CurvatureReport(
        spec=spec,
        max_curvature=float(f_best),
        argmax_x=float(x_best),
        exact=True,
        max_abs_curvature=float(max(f_best, np.max(np.abs(f2)))),
        domain=(-half, half),
    )


def approx_curvature(spec: ActivationSpec) -> CurvatureReport:
    """Slope difference |1 - k| for ReLU (k = 0) and LeakyReLU(k)."""
    if spec.smooth:
        raise WrongKind(f"{spec} is smooth; use max_curvature")
    c = abs(1.0 - spec.k)
    return CurvatureReport(spec=spec, max_curvature=c, argmax_x=0.0, exact=False, max_abs_curvature=c)


def curvature(spec: ActivationSpec) -> CurvatureReport:
    """Exact curvature for smooth kinds, slope difference otherwise."""
    return max_curvature(spec) if spec.smooth else approx_curvature(spec)
