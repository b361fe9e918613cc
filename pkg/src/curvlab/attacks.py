"""l-infinity adversaries (FGSM, PGD with restarts) and a brute-force search
for the minimal l2 perturbation that flips a scalar classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from curvlab import tensor_core as tc
from curvlab.errors import NonFinite, NotFooled, WrongSide

# slack allowed on the l-infinity ball check
BALL_SLACK = 1e-9


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    steps: int
    restarts: int = 1
    clamp_min: float | None = None
    clamp_max: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.steps > 0 and not self.alpha > 0:
            raise ValueError("alpha must be positive when steps > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if (self.clamp_min is None) != (self.clamp_max is None):
            raise ValueError("clamp_min and clamp_max must be given together")
        if self.clamp_min is not None and not self.clamp_min < self.clamp_max:
            raise ValueError("clamp_min must be below clamp_max")

    def clamp(self, x: np.ndarray) -> np.ndarray:
        if self.clamp_min is None:
            return x
        return np.clip(x, self.clamp_min, self.clamp_max)


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    loss: np.ndarray  # per-sample loss at x_adv
    success: np.ndarray  # per-sample: x_adv is misclassified


def project_linf(x_bar, x, epsilon: float) -> np.ndarray:
    """Clamp ``x_bar`` elementwise into [x - epsilon, x + epsilon]."""
    x_bar = np.asarray(x_bar, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(np.minimum(x_bar, x + epsilon), x - epsilon)
    # x +/- epsilon can round one ulp past the ball; step back inside
    for _ in range(4):
        hi = out - x > epsilon
        lo = x - out > epsilon
        if not (hi.any() or lo.any()):
            break
        out[hi] = np.nextafter(out[hi], -np.inf)
        out[lo] = np.nextafter(out[lo], np.inf)
    return out


def _check_ball(x_hat, x, epsilon):
    dev = np.abs(x_hat - x).reshape(len(x), -1).max(axis=1) if x.size else np.zeros(0)
    assert np.all(dev <= epsilon + BALL_SLACK), f"left the l-inf ball by {dev.max() - epsilon:.3g}"


def _misclassified(model, x, y) -> np.ndarray:
    return model.logits(x).argmax(axis=1) != np.asarray(y)


def fgsm(model, x, y, epsilon: float, clamp_min=None, clamp_max=None) -> AdvBatch:
    """One signed-gradient step of size epsilon.

    ReLU-type kinks use the right-hand slope, i.e. the pre-activation is
    treated as nudged to +0.
    """
    x = np.asarray(x, dtype=np.float64)
    _, g = model.loss_and_input_grad(x, y)
    x_adv = x + epsilon * np.sign(g)
    if clamp_min is not None:
        x_adv = np.clip(x_adv, clamp_min, clamp_max)
    _check_ball(x_adv, x, epsilon)
    return AdvBatch(x_adv, model.losses(x_adv, y), _misclassified(model, x_adv, y))


def uniform_init(cfg: AttackConfig, sample_ids, restart: int, sample_shape: tuple, stream: int = 0) -> np.ndarray:
    """U(-eps, eps) noise drawn from a Philox stream keyed by (seed, stream)
    and positioned by (sample id, restart), so it does not depend on batching."""
    out = np.empty((len(sample_ids),) + tuple(sample_shape))
    size = int(np.prod(sample_shape))
    for row, sid in enumerate(sample_ids):
        bitgen = np.random.Philox(key=[cfg.seed, stream], counter=[0, 0, int(sid), restart])
        out[row] = np.random.Generator(bitgen).uniform(-cfg.epsilon, cfg.epsilon, size=size).reshape(sample_shape)
    return out


def pgd_linf(model, x, y, cfg: AttackConfig, sample_ids=None, stream: int = 0, include_clean: bool = False) -> AdvBatch:
    """Multi-restart l-infinity PGD.

    Every iterate (random start included) is a candidate and the highest-loss
    candidate per sample is returned.  With ``include_clean`` the clean input
    is candidate zero, so the returned loss is never below the clean loss.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    sample_ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)

    best_x = x.copy()
    best_loss = np.full(n, -np.inf)
    if include_clean:
        best_loss = model.losses(x, y)

    def consider(cand, loss):
        better = loss > best_loss
        best_x[better] = cand[better]
        best_loss[better] = loss[better]

    for r in range(cfg.restarts):
        x_hat = cfg.clamp(x + uniform_init(cfg, sample_ids, r, x.shape[1:], stream))
        _check_ball(x_hat, x, cfg.epsilon)
        for _ in range(cfg.steps):
            loss, g = model.loss_and_input_grad(x_hat, y)
            if not np.all(np.isfinite(loss)):
                raise NonFinite("non-finite loss during PGD")
            consider(x_hat, loss)
            x_bar = x_hat + cfg.alpha * np.sign(g)
            x_hat = cfg.clamp(project_linf(x_bar, x, cfg.epsilon))
            _check_ball(x_hat, x, cfg.epsilon)
        consider(x_hat, model.losses(x_hat, y))
    return AdvBatch(best_x, best_loss, _misclassified(model, best_x, y))


# ---------------------------------------------------------------------------
# minimal l2 perturbation by brute force
# ---------------------------------------------------------------------------


def _values_and_grads(f, xs: np.ndarray):
    xv = tc.variable(xs)
    out = f(xv)
    g = tc.grad(tc.sum(out), xv)
    return out.data.reshape(-1), g.data


def _values(f, xs: np.ndarray) -> np.ndarray:
    with tc.no_grad():
        out = f(tc.as_tensor(xs))
    return np.asarray(out.data if isinstance(out, tc.Tensor) else out).reshape(-1)


def _project_ball(delta: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    return delta * scale


def _ball_max(f, x, radius, starts, max_iter=400):
    """Multi-start projected gradient ascent of f(x + delta) over ||delta|| <= radius.

    Returns as soon as some start reaches f >= 0.
    """
    delta = starts * radius
    vals, grads = _values_and_grads(f, x + delta)
    step = np.full(len(delta), radius)
    floor = 1e-10 * max(radius, 1e-3)
    for _ in range(max_iter):
        if vals.max() >= 0:
            break
        gn = np.linalg.norm(grads, axis=1, keepdims=True)
        cand = _project_ball(delta + step[:, None] * grads / np.maximum(gn, 1e-300), radius)
        cv, cg = _values_and_grads(f, x + cand)
        ok = cv > vals
        delta[ok], vals[ok], grads[ok] = cand[ok], cv[ok], cg[ok]
        step = np.where(ok, np.minimum(step * 1.5, 2 * radius), step * 0.5)
        if np.all(step < floor):
            break
    i = int(np.argmax(vals))
    return float(vals[i]), delta[i].copy()


def min_l2_perturbation_bruteforce(f, x, budget_grid=None, starts: int = 64, tol: float = 1e-4, seed: int = 0):
    """Smallest ||delta||_2 with f(x + delta) >= 0, for f(x) < 0.

    ``f`` maps an (n, d) batch to n scores.  A budget radius is feasible when
    multi-start ascent on the ball of that radius reaches f >= 0; bisection
    on the radius then narrows the feasible threshold well below ``tol`` and
    the returned perturbation is shrunk along its ray onto f = 0.

    Returns ``(norm, delta)``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    f0 = _values(f, x[None])[0]
    if f0 >= 0:
        raise WrongSide(f"f(x) = {f0:.6g} >= 0; x is not in class 1")
    if budget_grid is None:
        budget_grid = 2.0 ** np.arange(-8, 11)
    budget_grid = np.sort(np.asarray(budget_grid, dtype=np.float64))

    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(starts, d))
    _, g0 = _values_and_grads(f, x[None])
    if np.linalg.norm(g0) > 0:
        dirs[0] = g0[0]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    lo, hi, witness = 0.0, None, None
    for r in budget_grid:
        val, delta = _ball_max(f, x[None], r, dirs.copy())
        if val >= 0:
            hi, witness = float(r), delta
            break
        lo = float(r)
    if hi is None:
        raise NotFooled(f"no perturbation within radius {budget_grid[-1]:.6g} flips the sign")

    resolution = tol * 1e-2 * max(hi, 1e-3)
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        warm = dirs.copy()
        warm[1] = witness / max(np.linalg.norm(witness), 1e-300)
        val, delta = _ball_max(f, x[None], mid, warm)
        if val >= 0:
            hi, witness = mid, delta
        else:
            lo = mid

    # shrink the witness along its ray onto the decision boundary
    t_lo, t_hi = 0.0, 1.0
    while t_hi - t_lo > 1e-12:
        t = 0.5 * (t_lo + t_hi)
        if _values(f, (x + t * witness)[None])[0] >= 0:
            t_hi = t
        else:
            t_lo = t
    delta_star = t_hi * witness
    return float(np.linalg.norm(delta_star)), delta_star
