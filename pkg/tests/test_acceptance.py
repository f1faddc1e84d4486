"""End-to-end acceptance checks.  Each test records one PASS/FAIL line, echoed in the terminal summary.

The training-based checks run the shipped configurations at their desk-scale budgets and take
tens of minutes in total.
"""
import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import deepfosls.experiments as ex
from deepfosls.assembly import Coefficients, assemble, loss_at
from deepfosls.cli import EXIT_OK, main
from deepfosls.config import load_config
from deepfosls.fields import make_problem
from deepfosls.geometry import Box, integrate, partition_uniform, sample_p1
from deepfosls.metrics import FineEvaluator, tv_gradient_error
from deepfosls.network import build_network, spanning_sample
from deepfosls.poincare import estimate_poincare, oracle_lambda1
from deepfosls.training import (
    FOSLS,
    DiscreteSolution,
    derive_seed,
    envelope_gradient,
    fine_coefficients,
    fosls_loss_pointwise,
    gradient_variance_probe,
    train,
)
from conftest import ACCEPTANCE_LINES

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SWEEP = [1e-6, 1e-3, 1.0, 1e3, 1e6]

pytestmark = pytest.mark.slow


def verdict(number, name, ok, detail):
    line = f"criterion {number:>3} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    ex.sweep_kappa(load_config(CONFIGS / "sweep_kappa.toml"), out)
    return out


@pytest.fixture(scope="module")
def interface_runs(tmp_path_factory):
    outs = [tmp_path_factory.mktemp(f"interface_{i}") for i in range(2)]
    codes = [main(["run", "--config", str(CONFIGS / "interface1d.toml"), "--out", str(o)]) for o in outs]
    return codes, outs


# -- 1 ---------------------------------------------------------------------------------


def test_c01_loss_error_sandwich():
    t0 = time.perf_counter()
    worst_lo, worst_hi = math.inf, -math.inf
    rng = np.random.default_rng(2024)
    for kappa0 in SWEEP:
        p = make_problem("interface1d", kappa0=kappa0)
        ev = FineEvaluator.for_problem(p, 20_001)
        C = p.poincare_reference
        x = ev.rule.points
        for trial in range(50):
            net = build_network(1, 8, jitter=float(rng.uniform(0, 0.5)), jitter_seed=int(rng.integers(2**32)))
            c = Coefficients(rng.normal(size=8) * 10.0 ** rng.uniform(-2, 2),
                             rng.normal(size=8) * 10.0 ** rng.uniform(-2, 2))
            r = ev.report(DiscreteSolution(net, p.lifting, c, C).fields(x), C)
            ratio2 = r.loss_fine / (r.err_u**2 + r.err_q**2)
            worst_lo, worst_hi = min(worst_lo, ratio2), max(worst_hi, ratio2)
    elapsed = time.perf_counter() - t0
    ok = worst_lo >= 1 / 8 - 1e-9 and worst_hi <= 2 + 1e-9 and elapsed < 60
    verdict(1, "loss/error sandwich", ok, f"L/|||e|||^2 in [{worst_lo:.4f}, {worst_hi:.4f}] over 250 pairs, {elapsed:.1f}s")


# -- 2 ---------------------------------------------------------------------------------


def test_c02_poincare_agreement(sweep_dir):
    doc = json.loads((sweep_dir / "sweep.json").read_text())
    errs = {k: v["poincare_rel_error"] for k, v in doc["kappa0"].items()}
    self_test = abs(oracle_lambda1(1.0, 1.0, 0.5) - np.pi**2) / np.pi**2
    ok = all(e is not None and e <= 0.05 for e in errs.values()) and self_test <= 1e-10
    detail = ", ".join(f"kappa0={k}: {e:.2%}" for k, e in errs.items())
    verdict(2, "Poincare estimate vs reference", ok, f"{detail}; pi^2 self-test rel {self_test:.1e}")


# -- 3 ---------------------------------------------------------------------------------


def test_c03_interface_reproduction(interface_runs):
    codes, outs = interface_runs
    report = json.loads((outs[0] / "report.json").read_text())
    f = report["final"]
    ok = codes[0] == EXIT_OK and f["rel_u"] <= 0.02 and f["rel_q"] <= 0.02 and report["wall_seconds"] <= 600
    verdict(3, "interface1d(3) reproduction", ok,
            f"rel_u {f['rel_u']:.2%}, rel_q {f['rel_q']:.2%}, {report['wall_seconds']:.0f}s")


# -- 4 ---------------------------------------------------------------------------------


def test_c04_robustness_ratio(sweep_dir):
    doc = json.loads((sweep_dir / "sweep.json").read_text())
    lo, hi = doc["bounds"]
    within = all(v["all_within"] for v in doc["kappa0"].values())
    rmin = min(v["ratio_min"] for v in doc["kappa0"].values())
    rmax = max(v["ratio_max"] for v in doc["kappa0"].values())
    spread = doc["standard_ratio_spread"]
    ok = within and spread is not None and spread > 10
    verdict(4, "robustness ratio", ok,
            f"robust ratio in [{rmin:.3f}, {rmax:.3f}] vs band [{lo:.3f}, {hi:.3f}]; unweighted ratio spread {spread:.3g}")


# -- 5 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def variance_snapshots():
    p = make_problem("interface1d", kappa0=3.0)
    cfg = load_config(CONFIGS / "interface1d.toml")
    # a perturbed start gives a long loss descent to observe
    tc = cfg.train.model_copy(update={"learning_rate": 3e-4, "log_period": 500})
    tc = cfg.model_copy(update={"train": tc, "outputs": cfg.outputs.model_copy(update={"checkpoint_period": 625})})
    tc = tc.train_config()
    ev = FineEvaluator.for_problem(p, 20_001)
    rows = []

    def probe(k, sol):
        rep = gradient_variance_probe(sol.net, p, tc, sol.poincare, 100, derive_seed(tc.seed, "variance-probe", k), ev.rule)
        rows.append((k, rep))

    train(p, tc, build_network(1, 16, jitter=0.3, jitter_seed=1), evaluator=ev, on_checkpoint=probe)
    return rows


def test_c05a_variance_bound(variance_snapshots):
    rows = variance_snapshots
    ok = len(rows) == 5 and all(r.max_variance <= r.bound and r.component_bound_ok for _, r in rows)
    worst = max(r.ratio for _, r in rows)
    verdict("5a", "gradient variance bound", ok, f"{len(rows)} snapshots, max Var/bound {worst:.2e}")


def test_c05b_variance_tracks_loss(variance_snapshots):
    rows = variance_snapshots
    first, last = rows[0][1], rows[-1][1]
    loss_drop = first.loss_fine / last.loss_fine
    var_drop = first.max_variance / last.max_variance
    # the claim concerns a loss decrease of at least two decades
    ok = loss_drop >= 100 and var_drop >= 10
    verdict("5b", "variance drop with loss", ok,
            f"loss dropped {loss_drop:.3g}x, max variance changed by factor {1 / var_drop:.3g} "
            f"(C_grad {first.c_grad:.3g} -> {last.c_grad:.3g})")


# -- 6 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stability(tmp_path_factory):
    cfg = load_config(CONFIGS / "variance_study.toml")
    cfg = cfg.model_copy(update={"variance": cfg.variance.model_copy(update={"fosls_points": [50], "ritz_points": [300]})})
    return ex.variance_study(cfg, tmp_path_factory.mktemp("variance"))


def test_c06a_coarse_least_squares_is_stable(stability):
    e = stability["runs"][FOSLS]["50"]
    ok = not e["aborted"] and e["finite_loss"] and e["iterations"] == 10_000 and e["final_rel_u"] <= 0.05
    verdict("6a", "least squares with N=50", ok, f"finite loss {e['finite_loss']}, final rel_u {e['final_rel_u']:.2%}")


def test_c06b_coarse_ritz_is_unstable(stability):
    e = stability["runs"]["deep_ritz"]["300"]
    verdict("6b", "Ritz baseline with N=300 flagged unstable", e["instability"],
            f"aborted {e['aborted']}, final rel_u {e['final_rel_u']:.2%}, min rel_u {e['min_rel_u']:.2%}")


# -- 7 ---------------------------------------------------------------------------------


def test_c07_quasi_gibbs(tmp_path_factory):
    doc = ex.gibbs_study(load_config(CONFIGS / "gibbs_study.toml"), tmp_path_factory.mktemp("gibbs"))
    v = doc["variants"]
    requ, tanh = v["requ_L1"]["tv"], v["tanh_L1"]["tv"]
    zero = type("Zero", (), {"grad_u": staticmethod(lambda x: np.zeros_like(x))})
    ramp_err = 0.0
    for A, eps in ((4.18879, 0.01), (1.0, 0.1), (7.5, 0.001)):
        g = type("Ramp", (), {"grad_u": staticmethod(lambda x, A=A, eps=eps: A * np.clip((x - 0.5 + eps / 2) / eps, 0, 1))})
        ramp_err = max(ramp_err, abs(tv_gradient_error(zero, g) - A) / A)
    ok = requ <= 6 and tanh > requ and ramp_err <= 1e-12
    verdict(7, "quasi-Gibbs total variation", ok,
            f"TV requ L=1 {requ:.3f}, requ L=2 {v['requ_L2']['tv']:.3f}, tanh {tanh:.3f}; ramp oracle rel err {ramp_err:.1e}")


# -- 8 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("name, tol_u, tol_q", [("circle2d", 0.06, 0.03), ("plane2d", 0.03, 0.06)])
def test_c08_two_dimensional(tmp_path_factory, name, tol_u, tol_q):
    cfg = load_config(CONFIGS / f"{name}.toml")
    _, report = ex.execute_run(cfg, tmp_path_factory.mktemp(name))
    f = report["final"]
    ok = f["rel_u"] <= tol_u and f["rel_q"] <= tol_q
    verdict(f"8{name[0]}", f"{name} at {cfg.train.iterations} iterations", ok,
            f"rel_u {f['rel_u']:.2%} (<= {tol_u:.0%}), rel_q {f['rel_q']:.2%} (<= {tol_q:.0%}), {report['wall_seconds']:.0f}s")


# -- 9 ---------------------------------------------------------------------------------


def test_c09_numerical_kernels():
    p = make_problem("interface1d", kappa0=3.0)
    net = build_network(1, 6, jitter=0.05, jitter_seed=3)
    rule = sample_p1(partition_uniform(p.box, [200]), 11)
    C = 0.3
    system = assemble(net, p, rule, C)
    c = Coefficients(*np.split(np.random.default_rng(0).normal(size=12), [6]))
    s = spanning_sample(net, p.lifting, rule.points)
    direct = float(rule.weights @ fosls_loss_pointwise(s, c, p.kappa(rule.points), p.source(rule.points), C))
    form_err = abs(loss_at(system, c) - direct) / direct

    c_star = fine_coefficients(net, p, C, rule)
    g = envelope_gradient(net, p, rule, c_star, C).vector()
    theta = net.parameters()

    def frozen(th):
        ss = spanning_sample(net.with_parameters(th), p.lifting, rule.points)
        return float(rule.weights @ fosls_loss_pointwise(ss, c_star, p.kappa(rule.points), p.source(rule.points), C))

    h = 1e-5
    fd = np.array([(frozen(theta + h * e) - frozen(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
    grad_err = float(np.max(np.abs(g - fd)) / np.max(np.abs(g)))

    box = Box(np.zeros(2), np.array([1.0, 2.0]))
    part = partition_uniform(box, [5, 7])
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=part.n_cells), rng.normal(size=(part.n_cells, 2))

    def piecewise_affine(x):
        idx = np.floor((x - box.lower) / part.cell_width).astype(int)
        idx = np.minimum(idx, np.array(part.cells_per_axis) - 1)
        cell = np.ravel_multi_index(idx.T, part.cells_per_axis)
        centre = part.cell_lower[cell] + part.cell_width / 2
        return a[cell] + np.sum(b[cell] * (x - centre), axis=1)

    exact = part.cell_volume * a.sum()
    p1_err = abs(integrate(sample_p1(part, 5), piecewise_affine) - exact) / abs(exact)
    eig = estimate_poincare(np.diag([2.0, 8.0]), np.eye(2), np.ones(2), 0.0, 0.0).lambda_min
    eig_err = abs(eig - 2.0) / 2.0
    ok = form_err <= 1e-10 and grad_err <= 1e-4 and p1_err <= 1e-12 and eig_err <= 1e-12
    verdict(9, "numerical kernels", ok,
            f"form {form_err:.1e}, envelope gradient {grad_err:.1e}, P1 {p1_err:.1e}, pencil {eig_err:.1e}")


# -- 10 --------------------------------------------------------------------------------


def test_c10_determinism(interface_runs):
    codes, outs = interface_runs
    a, b = (read_csv(o / "history.csv") for o in outs)
    wall = a[0].index("wall_ms")
    strip = lambda rows: [[v for i, v in enumerate(r) if i != wall] for r in rows]
    same_history = strip(a) == strip(b)
    same_rest = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in ("poincare.csv", "solution_1d.csv"))
    ok = codes == [EXIT_OK, EXIT_OK] and same_history and same_rest
    verdict(10, "determinism", ok, f"{len(a) - 1} history rows identical apart from wall_ms: {same_history}; "
            f"poincare/solution CSVs byte-identical: {same_rest}")
