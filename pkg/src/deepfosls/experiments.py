"""Experiment drivers: single runs, the coefficient sweep, the quadrature-size study, the
gradient-error total variation study and the Poincare check.  Results are CSV and JSON only."""
from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import RunConfig
from .errors import ConfigurationError, NumericalError, TrainingAborted
from .fields import ProblemSpec, make_problem
from .geometry import trapezoid_rule
from .metrics import (
    GRADIENT_JUMP_INTERFACE_3,
    ROBUST_RATIO_BOUNDS,
    FineEvaluator,
    gradient_error_profile,
)
from .assembly import assemble_ritz
from .network import Network, build_network, make_activation, spanning_sample
from .poincare import assemble_mass, estimate_poincare, oracle_lambda1
from .training import (
    DEEP_RITZ,
    FOSLS,
    HISTORY_COLUMNS,
    DiscreteSolution,
    derive_seed,
    gradient_variance_probe,
    train,
)

RATIO_SLACK = 0.05
SOLUTION_1D_COLUMNS = ["x", "u", "du_dx", "q", "div_q", "u_exact", "du_dx_exact", "q_exact", "div_q_exact"]
SOLUTION_2D_COLUMNS = [
    "x", "y", "u", "grad_u_x", "grad_u_y", "grad_u_norm", "q_x", "q_y", "div_q",
    "err_u_density", "err_q_density",
]

# column documentation written into every output directory
COLUMN_DOCS = {
    "history.csv": (HISTORY_COLUMNS, "one row per iteration; error columns are relative energy-norm errors on the fine rule, "
                    "blank (nan) between logging periods; for Deep Ritz runs train_loss/val_loss are Ritz energies"),
    "poincare.csv": (["iteration", "lambda_min", "estimate", "running_max"], "every update of the discrete Poincare estimate"),
    "solution_1d.csv": (SOLUTION_1D_COLUMNS, "final discrete solution and exact pair on a uniform grid"),
    "solution_2d.csv": (SOLUTION_2D_COLUMNS, "final fields on a uniform grid; err_u_density = kappa |grad(u* - u)|^2, "
                        "err_q_density = |q* - q|^2 / kappa + C^2 (div q* - div q)^2"),
    "robustness.csv": (["iteration", "kappa0", "ratio", "lower", "upper", "within", "standard_ratio"],
                       "sqrt(loss)/|||e||| per logged iteration and coefficient contrast; bounds include the slack"),
    "poincare_sweep.csv": (["kappa0", "iteration", "estimate", "running_max", "reference", "rel_error"],
                           "discrete running-max estimate against the transcendental-equation reference"),
    "gibbs.csv": (["label", "activation", "layers", "iterations", "tv", "tv_with_jump", "rel_u", "rel_q", "jump_reference"],
                  "total variation of the gradient error on the window, with and without the exact-gradient jump"),
    "profile_<label>.csv": (["x", "grad_error"], "gradient error (u* - u)' on the half-step-offset window grid"),
    "history_<loss>_N<points>.csv": (HISTORY_COLUMNS, "training trajectory of one quadrature-size run"),
    "variance_probe.csv": (["loss", "points", "iteration", "loss_fine", "max_variance", "c_grad", "bound", "ratio"],
                           "gradient variance over independent rules at fixed parameters and coefficients"),
}


# -- small io helpers -------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: Path, doc) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def write_readme(out: Path, files: Iterable[str], title: str) -> None:
    lines = [f"# {title}", "", "Every CSV has a header row; columns appear in the order listed.", ""]
    for name in files:
        cols, note = COLUMN_DOCS[name]
        lines += [f"## {name}", "", note + ".", "", "Columns: " + ", ".join(f"`{c}`" for c in cols), ""]
    (out / "README.md").write_text("\n".join(lines))


# -- construction ----------------------------------------------------------------------


def build_problem(cfg: RunConfig, kappa0: Optional[float] = None) -> ProblemSpec:
    params = cfg.problem.params()
    if kappa0 is not None:
        if cfg.problem.id != "interface1d":
            raise ConfigurationError("a kappa0 sweep needs the interface1d problem")
        params["kappa0"] = kappa0
    return make_problem(cfg.problem.id, **params)


def build_net(cfg: RunConfig, dim: int, activation: Optional[str] = None, layers: Optional[int] = None) -> Network:
    n = cfg.network
    act = make_activation(activation or n.activation, n.m)
    return build_network(dim, n.width, layers or n.layers, act, n.jitter, n.jitter_seed)


# -- single run --------------------------------------------------------------------------


def _final_report(sol: DiscreteSolution, evaluator: Optional[FineEvaluator], loss_kind: str) -> Optional[dict]:
    if evaluator is None:
        return None
    fl = sol.fields(evaluator.rule.points)
    if loss_kind == DEEP_RITZ:
        return {"rel_u": evaluator.potential_error(fl["grad_u"]), "ritz_energy": evaluator.ritz_energy(fl["u"], fl["grad_u"])}
    return evaluator.report(fl, sol.poincare).to_dict()


def _solution_rows(sol: DiscreteSolution, problem: ProblemSpec, nodes: int):
    box = problem.box
    if problem.dim == 1:
        x = np.linspace(box.lower[0], box.upper[0], nodes)[:, None]
        fl = sol.fields(x)
        ex = problem.exact
        cols = [x[:, 0], fl["u"], fl["grad_u"][:, 0], fl["q"][:, 0], fl["div_q"]]
        if ex is not None:
            cols += [ex.u(x), np.asarray(ex.grad_u(x))[:, 0], np.asarray(ex.q(x))[:, 0], ex.div_q(x)]
        else:
            cols += [np.full(nodes, np.nan)] * 4
        return "solution_1d.csv", SOLUTION_1D_COLUMNS, zip(*cols)
    axes = [np.linspace(box.lower[i], box.upper[i], nodes) for i in range(2)]
    X, Y = np.meshgrid(*axes, indexing="ij")
    x = np.column_stack([X.ravel(), Y.ravel()])
    fl = sol.fields(x)
    k = problem.kappa(x)
    gu, q = fl["grad_u"], fl["q"]
    ex = problem.exact
    if ex is not None:
        eg = np.asarray(ex.grad_u(x)) - gu
        eq = np.asarray(ex.q(x)) - q
        ed = np.asarray(ex.div_q(x)) - fl["div_q"]
        err_u = k * np.sum(eg**2, axis=1)
        err_q = np.sum(eq**2, axis=1) / k + sol.poincare**2 * ed**2
    else:
        err_u = err_q = np.full(x.shape[0], np.nan)
    cols = [x[:, 0], x[:, 1], fl["u"], gu[:, 0], gu[:, 1], np.linalg.norm(gu, axis=1), q[:, 0], q[:, 1], fl["div_q"], err_u, err_q]
    return "solution_2d.csv", SOLUTION_2D_COLUMNS, zip(*cols)


def write_history(path: Path, history) -> None:
    write_csv(path, HISTORY_COLUMNS, (r.row() for r in history))


def execute_run(
    cfg: RunConfig,
    out: Path,
    seed: Optional[int] = None,
    problem: Optional[ProblemSpec] = None,
    net: Optional[Network] = None,
    samples: bool = True,
    extra: Optional[dict] = None,
) -> tuple:
    """Train once, write history, Poincare log, checkpoints, solution samples and report.json.

    Returns ``(TrainResult, report dict)``.  A :class:`TrainingAborted` propagates after
    the partial report has been written.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = problem or build_problem(cfg)
    net = net or build_net(cfg, problem.dim)
    tc = cfg.train_config(seed)
    digest = cfg.digest()
    evaluator = FineEvaluator.for_problem(problem, cfg.metrics.fine_nodes) if problem.exact is not None else None
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    def save_checkpoint(k: int, sol: DiscreteSolution, tag: Optional[str] = None) -> None:
        name = tag or f"{k:06d}"
        doc = sol.net.to_dict()
        doc.update(config_digest=digest, iteration=k)
        write_json(ckpt / f"network_{name}.json", doc)
        coef = sol.coefficients_dict()
        coef.update(config_digest=digest, iteration=k)
        write_json(ckpt / f"coefficients_{name}.json", coef)

    report = {
        "problem": problem.name,
        "params": problem.params,
        "seed": tc.seed,
        "config_digest": digest,
        "config": cfg.model_dump(),
        "train": tc.to_dict(),
        **(extra or {}),
    }
    t0 = time.perf_counter()
    files = ["history.csv", "poincare.csv"]
    try:
        result = train(problem, tc, net, evaluator=evaluator, on_checkpoint=save_checkpoint)
    except TrainingAborted as exc:
        report.update(status="aborted", message=str(exc), abort_iteration=exc.iteration, abort_seed=exc.seed,
                      wall_seconds=time.perf_counter() - t0)
        write_json(out / "report.json", report)
        write_readme(out, [], f"Run output ({problem.name}, aborted)")
        raise
    sol = result.solution
    save_checkpoint(tc.iterations, sol, "final")
    write_history(out / "history.csv", result.history)
    write_csv(out / "poincare.csv", COLUMN_DOCS["poincare.csv"][0],
              ((p.iteration, p.lambda_min, p.value, p.running_max) for p in result.poincare_log))
    if samples:
        name, header, rows = _solution_rows(sol, problem, cfg.metrics.sample_nodes)
        write_csv(out / name, header, rows)
        files.append(name)
    last = result.history[-1]
    est = result.poincare_log[-1] if result.poincare_log else None
    report.update(
        status="ok",
        iterations=tc.iterations,
        train_loss_final=last.train_loss,
        final=_final_report(sol, evaluator, tc.loss_kind),
        poincare={
            "used": sol.poincare,
            "estimate": est.value if est else None,
            "running_max": est.running_max if est else None,
            "reference": problem.poincare_reference,
            "rel_error": (abs(est.running_max - problem.poincare_reference) / problem.poincare_reference
                          if est and problem.poincare_reference else None),
        },
        ratio_bounds=list(ROBUST_RATIO_BOUNDS),
        wall_seconds=time.perf_counter() - t0,
    )
    if problem.dim == 1 and problem.exact is not None:
        win = cfg.metrics.tv_window
        _, _, tv = gradient_error_profile(sol, problem.exact, win, cfg.metrics.tv_nodes, problem.box, problem.kappa)
        report["tv_gradient_error"] = {"window": win, "grid_nodes": cfg.metrics.tv_nodes, "tv": tv}
    write_json(out / "report.json", report)
    write_readme(out, files, f"Run output ({problem.name})")
    return result, report


# -- studies -----------------------------------------------------------------------------


def sweep_kappa(cfg: RunConfig, out: Path, seed: Optional[int] = None, kappas: Optional[Sequence[float]] = None) -> dict:
    """One run per contrast; combined ratio and Poincare tables."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    kappas = list(kappas if kappas is not None else cfg.sweep.kappa0)
    lo, hi = ROBUST_RATIO_BOUNDS[0] * (1 - RATIO_SLACK), ROBUST_RATIO_BOUNDS[1] * (1 + RATIO_SLACK)
    rob_rows, pc_rows, summary = [], [], {}
    for kappa0 in kappas:
        problem = build_problem(cfg, kappa0)
        result, report = execute_run(cfg, out / f"kappa0_{kappa0:g}", seed, problem=problem)
        ratios, std = [], []
        for r in result.history:
            if math.isnan(r.ratio):
                continue
            ratios.append(r.ratio)
            std.append(r.standard_ratio)
            rob_rows.append((r.iteration, kappa0, r.ratio, lo, hi, int(lo <= r.ratio <= hi), r.standard_ratio))
        ref = problem.poincare_reference
        for p in result.poincare_log:
            pc_rows.append((kappa0, p.iteration, p.value, p.running_max, ref, abs(p.running_max - ref) / ref))
        summary[f"{kappa0:g}"] = {
            "ratio_min": min(ratios, default=math.nan),
            "ratio_max": max(ratios, default=math.nan),
            "all_within": all(lo <= v <= hi for v in ratios),
            "standard_ratio_median": float(np.median(std)) if std else math.nan,
            "poincare_rel_error": report["poincare"]["rel_error"],
            "final": report["final"],
        }
    write_csv(out / "robustness.csv", COLUMN_DOCS["robustness.csv"][0], rob_rows)
    write_csv(out / "poincare_sweep.csv", COLUMN_DOCS["poincare_sweep.csv"][0], pc_rows)
    medians = [v["standard_ratio_median"] for v in summary.values() if math.isfinite(v["standard_ratio_median"])]
    doc = {
        "bounds": [lo, hi],
        "kappa0": summary,
        "standard_ratio_spread": max(medians) / min(medians) if medians else None,
    }
    write_json(out / "sweep.json", doc)
    write_readme(out, ["robustness.csv", "poincare_sweep.csv"], "Coefficient-contrast sweep")
    return doc


def variance_study(cfg: RunConfig, out: Path, seed: Optional[int] = None) -> dict:
    """Least-squares and Ritz runs over quadrature sizes; marks aborted or stalled runs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    vs = cfg.variance
    stability = {FOSLS: {}, DEEP_RITZ: {}}
    probe_rows = []
    histories = []
    for kind, sizes in ((FOSLS, vs.fosls_points), (DEEP_RITZ, vs.ritz_points)):
        for n in sizes:
            train_sec = cfg.train.model_copy(update={"loss_kind": kind, "points": n, "cells_per_axis": None})
            run_cfg = cfg.model_copy(update={"train": train_sec})
            tc = run_cfg.train_config(seed)
            evaluator = FineEvaluator.for_problem(problem, cfg.metrics.fine_nodes)
            probe_at = set()
            if vs.probe_snapshots and tc.iterations:
                probe_at = {int(round(i * tc.iterations / vs.probe_snapshots)) for i in range(vs.probe_snapshots)}

            def probe(k, sol, kind=kind, n=n, tc=tc):
                if k not in probe_at:
                    return
                rep = gradient_variance_probe(sol.net, problem, tc, sol.poincare, vs.probe_resamples,
                                              derive_seed(tc.seed, "variance-probe", k), evaluator.rule)
                probe_rows.append((kind, n, k, rep.loss_fine, rep.max_variance, rep.c_grad, rep.bound, rep.ratio))

            if probe_at:
                tc.checkpoint_period = 1
            entry = {"aborted": False}
            try:
                result = train(problem, tc, build_net(cfg, problem.dim), evaluator=evaluator,
                               on_checkpoint=probe if probe_at else None)
                history = result.history
            except TrainingAborted as exc:
                entry.update(aborted=True, abort_iteration=exc.iteration, message=str(exc))
                history = []
            name = f"history_{kind}_N{n}.csv"
            write_history(out / name, history)
            histories.append(name)
            errs = [r.err_u_H1k for r in history if not math.isnan(r.err_u_H1k)]
            final = errs[-1] if errs else math.nan
            entry.update(
                iterations=tc.iterations,
                final_rel_u=final,
                min_rel_u=min(errs, default=math.nan),
                finite_loss=all(math.isfinite(r.train_loss) for r in history) and bool(history),
                instability=entry["aborted"] or not (final <= vs.instability_error),
            )
            stability[kind][str(n)] = entry
    doc = {"problem": problem.name, "instability_error": vs.instability_error, "runs": stability}
    write_json(out / "stability.json", doc)
    files = ["history_<loss>_N<points>.csv"]
    if probe_rows:
        write_csv(out / "variance_probe.csv", COLUMN_DOCS["variance_probe.csv"][0], probe_rows)
        files.append("variance_probe.csv")
    write_readme(out, files, "Quadrature-size study")
    return doc


def gibbs_study(cfg: RunConfig, out: Path, seed: Optional[int] = None) -> dict:
    """Total variation of the gradient error near the interface for several network families."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    if problem.dim != 1:
        raise ConfigurationError("the total variation study is one-dimensional")
    win, nodes = cfg.metrics.tv_window, cfg.metrics.tv_nodes
    rows, variants = [], {}
    for v in cfg.gibbs.variants:
        train_sec = cfg.train.model_copy(update={"iterations": v.iterations} if v.iterations is not None else {})
        net_sec = cfg.network.model_copy(update={"activation": v.activation, "layers": v.layers})
        run_cfg = cfg.model_copy(update={"train": train_sec, "network": net_sec})
        result, report = execute_run(run_cfg, out / v.label, seed, problem=problem, samples=True)
        sol = result.solution
        x, err, tv = gradient_error_profile(sol, problem.exact, win, nodes, problem.box, problem.kappa)
        _, _, tv_raw = gradient_error_profile(sol, problem.exact, win, nodes, problem.box, None)
        write_csv(out / f"profile_{v.label}.csv", ["x", "grad_error"], zip(x, err))
        final = report["final"]
        rows.append((v.label, v.activation, v.layers, train_sec.iterations, tv, tv_raw,
                     final["rel_u"], final["rel_q"], GRADIENT_JUMP_INTERFACE_3))
        variants[v.label] = {"tv": tv, "tv_with_jump": tv_raw, "rel_u": final["rel_u"], "rel_q": final["rel_q"]}
    write_csv(out / "gibbs.csv", COLUMN_DOCS["gibbs.csv"][0], rows)
    doc = {"window": win, "grid_nodes": nodes, "jump_reference": GRADIENT_JUMP_INTERFACE_3, "variants": variants}
    write_json(out / "gibbs.json", doc)
    write_readme(out, ["gibbs.csv", "profile_<label>.csv"], "Gradient-error total variation study")
    return doc


def poincare_check(cfg: RunConfig, out: Path, seed: Optional[int] = None) -> dict:
    """Discrete estimate after the configured training against the 1D transcendental-equation root."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    result, _ = execute_run(cfg, out / "run", seed, problem=problem, samples=False)
    tc = cfg.train_config(seed)
    # the same pencil on a deterministic fine rule for the final network
    nodes = cfg.metrics.fine_nodes or (20_001 if problem.dim == 1 else 201)
    rule = trapezoid_rule(problem.box, [nodes] * problem.dim)
    s = spanning_sample(result.solution.net, problem.lifting, rule.points)
    A = assemble_ritz(s, problem.kappa(rule.points), np.zeros(len(rule)), rule.weights).A
    M = assemble_mass(result.solution.net, problem.lifting, rule)
    D = np.sqrt(np.diag(A) + tc.epsilon_scale)
    fine = estimate_poincare(A, M, D, tc.alpha1, tc.alpha2, tc.iterations)
    # without the shift: isolates the bias the regularisation adds on clustered units
    try:
        bare = estimate_poincare(A, M, D, 0.0, 0.0, tc.iterations).value
    except NumericalError:
        bare = None
    oracle = None
    if problem.name in ("interface1d", "smooth1d"):
        k0 = problem.params.get("kappa0", 1.0)
        oracle = oracle_lambda1(k0, 1.0, 0.5) ** -0.5
    est = result.poincare_log[-1] if result.poincare_log else None
    doc = {
        "problem": problem.name,
        "params": problem.params,
        "oracle": oracle,
        "estimate": est.value if est else None,
        "running_max": est.running_max if est else None,
        "fine_rule_estimate": fine.value,
        "rel_error": abs(est.running_max - oracle) / oracle if (est and oracle) else None,
        "fine_rule_rel_error": abs(fine.value - oracle) / oracle if oracle else None,
        "fine_rule_unregularised": bare,
        "fine_rule_unregularised_rel_error": abs(bare - oracle) / oracle if (oracle and bare) else None,
        "oracle_self_test_pi2_rel_error": abs(oracle_lambda1(1.0, 1.0, 0.5) - math.pi**2) / math.pi**2,
    }
    write_json(out / "poincare_check.json", doc)
    return doc
