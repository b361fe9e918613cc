"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The training-trend criteria (8-10) share session-scoped sweeps run with the
shipped preset defaults, so the whole module takes tens of minutes on one core.
"""

import dataclasses
import math
import struct
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from curvlab import activations as act
from curvlab.activations import parse_activation
from curvlab.attacks import AttackConfig, fgsm, pgd_linf, project_linf
from curvlab.curvature_lab import (
    Quadratic,
    jacobi_eigh,
    largest_eigenpair,
    verify_sandwich,
)
from curvlab.datasets import load_idx, split_dataset, synth_dataset
from curvlab.errors import BadMagic, TruncatedFile
from curvlab.expcli import build_splits, default_config, read_csv_rows, run_preset
from curvlab.models import (
    Architecture,
    TwoLayerNet,
    init_weights,
    load_checkpoint,
    save_checkpoint,
    two_layer_input_hessian,
)
from curvlab import tensor_core as tc
from curvlab.trainer import TrainConfig, train_adversarial, write_metrics_csv

pytestmark = pytest.mark.acceptance

SMOOTH = ["lisht", "gelu", "mish", "silu"] + [f"pswish:beta={b}" for b in (0.5, 1, 2, 4, 10)]
SEEDS = (0, 1, 2, 3, 4)


def _median(values):
    return float(np.median(np.asarray(values, dtype=float)))


# ---------------------------------------------------------------------------
# 1-3: activation calculus and curvature
# ---------------------------------------------------------------------------


def test_c01_second_derivative_vs_finite_differences(criterion):
    grid = np.linspace(-6.0, 6.0, 12001)
    worst, start = {}, time.perf_counter()
    for name in SMOOTH:
        spec = parse_activation(name)
        h = 1e-2 / max(spec.beta if spec.kind in ("pswish", "silu") else 1.0, 1.0)
        f = lambda z: act.value(spec, z)  # noqa: E731
        fd = (-f(grid + 2 * h) + 16 * f(grid + h) - 30 * f(grid) + 16 * f(grid - h) - f(grid - 2 * h)) / (12 * h * h)
        exact = np.array([act.second_deriv(spec, float(x)) for x in grid])
        worst[name] = float(np.max(np.abs(exact - fd) / np.maximum(np.abs(fd), 1.0)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and elapsed < 5.0
    criterion(1, ok, f"max rel err {max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.2f} s")
    assert ok


def test_c02_curvature_ranking(criterion):
    c = {k: act.max_curvature(parse_activation(k)).max_curvature for k in ("lisht", "gelu", "mish", "silu")}
    ok = (
        abs(c["lisht"] - 2.0) <= 1e-3
        and abs(c["gelu"] - math.sqrt(2 / math.pi)) <= 1e-3
        and abs(c["silu"] - 0.5) <= 1e-3
        and c["lisht"] > c["gelu"] > c["mish"] > c["silu"]
    )
    criterion(2, ok, " ".join(f"{k}={v:.5f}" for k, v in c.items()))
    assert ok


def test_c03_pswish_curvature_law(criterion):
    errs = {b: abs(act.max_curvature(parse_activation(f"pswish:beta={b}")).max_curvature - 0.5 * b) for b in (0.5, 1, 2, 4, 10)}
    ok = max(errs.values()) <= 1e-3
    criterion(3, ok, f"max |curv - beta/2| = {max(errs.values()):.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 4-6: Hessian formula, bounds sandwich, eigen solver
# ---------------------------------------------------------------------------


def _fd_hessian(fn, x, h=1e-4):
    d = x.size
    out = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            ei, ej = np.eye(d)[i] * h, np.eye(d)[j] * h
            out[i, j] = (fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)) / (4 * h * h)
    return out


def test_c04_two_layer_hessian(criterion):
    rng = np.random.default_rng(4)
    kinds = ["lisht", "gelu", "mish", "silu", "pswish:beta=2"]
    worst, start = 0.0, time.perf_counter()
    for t in range(100):
        d, m = int(rng.integers(2, 6)), int(rng.integers(2, 9))
        spec = parse_activation(kinds[t % len(kinds)])
        net = TwoLayerNet(rng.standard_normal((m, d)) / math.sqrt(d), rng.standard_normal(m) / math.sqrt(m), spec)
        x = rng.uniform(-1, 1, d)
        fn = lambda v: float(net.w2 @ act.value(spec, net.w1 @ v))  # noqa: E731
        worst = max(worst, float(np.abs(two_layer_input_hessian(net, x) - _fd_hessian(fn, x)).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 30
    criterion(4, ok, f"max abs entry err {worst:.2e}, {elapsed:.2f} s")
    assert ok


def test_c05_sandwich(criterion, tmp_path):
    start = time.perf_counter()
    cfg = dataclasses.replace(default_config("lemma1_verify"), out_dir=str(tmp_path))
    res = run_preset("lemma1_verify", cfg)
    rows = {r["case"]: r for r in read_csv_rows(tmp_path / "lemma1.csv")}
    random_ok = sum(rows[f"random-{t}"]["holds"] == "true" for t in range(100))
    al = {k: float(rows["aligned"][k]) for k in ("lower", "upper", "delta_norm")}
    fixture = verify_sandwich(Quadratic(-1.0, np.array([1.0, 0.0]), np.diag([1.0, 0.0])), np.zeros(2))
    tight = (
        rows["aligned"]["holds"] == "true"
        and abs(al["lower"] - al["upper"]) <= 1e-4
        and abs(al["delta_norm"] - al["lower"]) <= 1e-4
        and abs(fixture.lower - fixture.upper) <= 1e-4
        and abs(fixture.delta_norm - (math.sqrt(3) - 1)) <= 1e-4
    )
    elapsed = time.perf_counter() - start
    ok = random_ok == 100 and tight and elapsed < 120
    criterion(
        5,
        ok,
        f"{random_ok}/100 random; aligned {al['delta_norm']:.6f} in [{al['lower']:.6f}, {al['upper']:.6f}]; "
        f"sqrt(3)-1 fixture {fixture.delta_norm:.6f}; {elapsed:.1f} s",
    )
    assert ok and res["passed"] == res["total"]


def test_c06_spectral_solver(criterion):
    rng = np.random.default_rng(6)
    worst, indefinite = 0.0, 0
    for t in range(50):
        d = int(rng.integers(2, 21))
        b = rng.standard_normal((d, d))
        a = 0.5 * (b + b.T)
        if t % 2:
            a -= 3.0 * np.eye(d)  # push most of the spectrum negative
        lam = jacobi_eigh(a)[0]
        lmax = float(lam.max())
        indefinite += abs(lmax) != float(np.abs(lam).max())
        spec = largest_eigenpair(lambda v: a @ v, d, seed=t, max_iter=5000, tol=1e-10)
        worst = max(worst, abs(spec.nu - lmax) / max(abs(lmax), 1e-12))
    ok = worst <= 1e-4 and indefinite > 0
    criterion(6, ok, f"max rel err {worst:.2e}, {indefinite} cases with lambda_max != |lambda|_max")
    assert ok


# ---------------------------------------------------------------------------
# 7: PGD contract
# ---------------------------------------------------------------------------


def test_c07_pgd_contract(criterion):
    projections = 0
    contained = True
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = r.uniform(size=(10_000,))
        eps = float(r.uniform(0.0, 0.5))
        xb = x + r.normal(scale=1.0, size=x.shape)
        p = project_linf(xb, x, eps)
        contained &= bool(np.all(np.abs(p - x) <= eps))
        projections += x.size

    arch = Architecture((20,), (32, 32), 2, parse_activation("silu"))
    splits = split_dataset(synth_dataset("two-moons", 600, 0.2, 0, extra_dims=18), seed=0)
    cfg = TrainConfig(
        epochs=10,
        batch_size=64,
        lr0=0.05,
        lr_drop_epochs=(5, 8),
        attack=AttackConfig(0.08, 0.02, 5, 1, 0.0, 1.0),
        eval_attack=AttackConfig(0.08, 0.02, 5, 1, 0.0, 1.0),
        eval_every=10,
    )
    model = train_adversarial(init_weights(arch, 0), splits, cfg).state
    x, y = splits.test.x, splits.test.y

    zero_eps = np.array_equal(pgd_linf(model, x, y, AttackConfig(0.0, 0.02, 10, 2)).x_adv, x)
    zs = AttackConfig(0.08, 0.0, 0, 1, seed=1)
    zero_steps = pgd_linf(model, x, y, zs)
    degenerate = zero_eps and bool(np.all(np.abs(zero_steps.x_adv - x) <= 0.08))

    fg = float(fgsm(model, x, y, 0.08, 0.0, 1.0).loss.mean())
    wins = sum(
        float(pgd_linf(model, x, y, AttackConfig(0.08, 0.02, 10, 1, 0.0, 1.0, seed=s)).loss.mean()) >= fg for s in range(20)
    )
    ok = contained and projections == 10**5 and degenerate and wins >= 18
    criterion(7, ok, f"{projections} projections contained={contained}, degenerate={degenerate}, PGD>=FGSM {wins}/20")
    assert ok


# ---------------------------------------------------------------------------
# 8-10: training trends on the shipped presets
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def activation_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("activation_sweep")
    cfg = dataclasses.replace(default_config("activation_sweep"), out_dir=str(out), sweep=("lisht", "silu"), seeds=SEEDS)
    start = time.perf_counter()
    res = run_preset("activation_sweep", cfg)
    res["seconds_per_run"] = (time.perf_counter() - start) / len(res["jobs"])
    res["cfg"] = cfg
    return res


def _by_key(rows, column):
    out = {}
    for r in rows:
        out.setdefault(r.sweep_key, []).append(100.0 * getattr(r.gap, column))
    return out


def test_c08_robust_overfitting_trend(criterion, activation_runs):
    rows = activation_runs["rows"]
    rob = {k: _median(v) for k, v in _by_key(rows, "robust_gap").items()}
    std = {k: _median(v) for k, v in _by_key(rows, "standard_gap").items()}
    per_run = activation_runs["seconds_per_run"]
    ok = (
        not activation_runs["failures"]
        and rob["lisht"] > rob["silu"]
        and std["lisht"] > std["silu"]
        and per_run <= 600
    )
    criterion(
        8,
        ok,
        f"median robust_gap lisht {rob['lisht']:.2f} vs silu {rob['silu']:.2f}; "
        f"median standard_gap lisht {std['lisht']:.2f} vs silu {std['silu']:.2f}; {per_run:.0f} s/run",
    )
    assert ok


def test_c09_hessian_trend(criterion, activation_runs, tmp_path):
    src = activation_runs["cfg"]
    cfg = dataclasses.replace(
        default_config("hessian_report"),
        out_dir=str(tmp_path),
        sweep=("lisht", "silu"),
        seeds=SEEDS,
        hessian=dataclasses.replace(default_config("hessian_report").hessian, source_dir=src.out_dir),
    )
    res = run_preset("hessian_report", cfg)
    med = {(r["sweep_key"], int(r["seed"])): float(r["median_nu"]) for r in read_csv_rows(tmp_path / "hessian_summary.csv")}
    wins = sum(med.get(("lisht", s), -np.inf) > med.get(("silu", s), np.inf) for s in SEEDS)
    ok = wins >= 4 and not res["failures"]
    detail = ", ".join(f"s{s} {med.get(('lisht', s), float('nan')):.3g}/{med.get(('silu', s), float('nan')):.3g}" for s in SEEDS)
    criterion(9, ok, f"lisht>silu median nu in {wins}/5 seeds ({detail}; selector {cfg.hessian.selector})")
    assert ok


def _sweep_rho(preset, points, tmp_path):
    cfg = dataclasses.replace(default_config(preset), out_dir=str(tmp_path / preset), sweep=points, seeds=SEEDS)
    res = run_preset(preset, cfg)
    curv = {r.sweep_key: r.extras["curvature"] for r in res["rows"]}
    rhos = []
    for s in SEEDS:
        rows = [r for r in res["rows"] if r.extras["seed"] == s]
        xs = [curv[r.sweep_key] for r in rows]
        ys = [r.gap.robust_gap for r in rows]
        rhos.append(spearmanr(xs, ys).statistic if len(rows) > 2 else float("nan"))
    return _median(rhos), rhos, res["failures"]


@pytest.mark.parametrize(
    "preset,points",
    [
        ("pswish_sweep", ("pswish:beta=0.5", "pswish:beta=1", "pswish:beta=2", "pswish:beta=4")),
        ("leakyrelu_sweep", ("leakyrelu:k=0.5", "leakyrelu:k=0.3", "leakyrelu:k=0", "leakyrelu:k=-0.2")),
    ],
)
def test_c10_curvature_gap_rank_correlation(criterion, preset, points, tmp_path):
    rho, rhos, failures = _sweep_rho(preset, points, tmp_path)
    ok = rho > 0 and not failures
    criterion(10, ok, f"{preset}: median Spearman rho {rho:.2f} (per seed {', '.join(f'{r:.2f}' for r in rhos)})")
    assert ok


# ---------------------------------------------------------------------------
# 11: determinism and I/O
# ---------------------------------------------------------------------------


def test_c11_determinism_and_io(criterion, tmp_path):
    cfg = default_config("activation_sweep")
    splits = build_splits(dataclasses.replace(cfg.dataset, n=300), 0)
    arch = Architecture(splits.train.x.shape[1:], (16,), 2, parse_activation("lisht"))
    tcfg = dataclasses.replace(cfg.train, epochs=3, lr_drop_epochs=(2,), eval_every=1)
    paths = []
    for name in ("a", "b"):
        res = train_adversarial(init_weights(arch, 7), splits, tcfg)
        paths.append(write_metrics_csv(res.history, tmp_path / f"{name}.csv"))
    same_csv = paths[0].read_bytes() == paths[1].read_bytes()

    state = res.state
    state.params = state.params.astype(np.float32).astype(np.float64)
    ckpt_ok = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", state), arch) == state

    img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
    pixels = np.zeros((4, 28, 28), dtype=np.uint8)
    pixels[2, 3, 4] = 255
    img.write_bytes(struct.pack(">IIII", 0x803, 4, 28, 28) + pixels.tobytes())
    lab.write_bytes(struct.pack(">II", 0x801, 4) + bytes([0, 1, 1, 0]))
    ds = load_idx(img, lab)
    idx_ok = ds.x.shape == (4, 1, 28, 28) and ds.y.shape == (4,) and ds.x[2, 0, 3, 4] == 1.0
    bad = img.read_bytes()
    img.write_bytes(struct.pack(">I", 0x802) + bad[4:])
    try:
        load_idx(img, lab)
        idx_ok = False
    except BadMagic:
        pass
    img.write_bytes(bad[:10])
    try:
        load_idx(img, lab)
        idx_ok = False
    except TruncatedFile:
        pass

    ok = same_csv and ckpt_ok and idx_ok
    criterion(11, ok, f"metrics byte-identical={same_csv}, checkpoint exact={ckpt_ok}, idx fixtures={idx_ok}")
    assert ok
