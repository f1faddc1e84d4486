"""Outer training loop: stochastic loss, envelope gradient, Adam, Poincare updates and the Ritz baseline.

Each iteration draws a fresh quadrature rule, solves the inner linear least
squares problem for the coefficients ``c*`` and moves the network parameters
along the gradient of the quadrature loss with ``c*`` and the Poincare
constant frozen.
"""
from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field, fields as dc_fields
from typing import Callable, List, Optional, Sequence

import numpy as np

from .assembly import (
    DEFAULT_EPSILON,
    DEFAULT_MU,
    Coefficients,
    assemble_from_sample,
    assemble_ritz,
    scale,
    solve_ls,
    solve_ritz,
)
from .errors import (
    AssemblyError,
    ConfigurationError,
    InvalidArgumentError,
    NonFiniteSampleError,
    NumericalError,
    TrainingAborted,
)
from .fields import Lifting, ProblemSpec
from .geometry import (
    QuadratureKind,
    QuadratureRule,
    partition_uniform,
    sample_mc,
    sample_p1,
    trapezoid_rule,
)
from .metrics import FineEvaluator
from .network import (
    Network,
    SampleCotangent,
    SpanningSample,
    backprop_parameter_gradient,
    spanning_sample,
)
from .poincare import DEFAULT_ALPHA1, DEFAULT_ALPHA2, PoincareEstimate, estimate_poincare, mass_from_sample

FOSLS = "fosls"
DEEP_RITZ = "deep_ritz"
LOSS_KINDS = (FOSLS, DEEP_RITZ)
POINCARE_MODES = ("estimate", "reference", "fixed")

HISTORY_COLUMNS = [
    "iteration",
    "train_loss",
    "val_loss",
    "err_u_H1k",
    "err_q_Hdivk",
    "err_total",
    "lr",
    "poincare",
    "grad_norm",
    "wall_ms",
    "ratio",
    "standard_ratio",
]

_EVAL_CHUNK = 100_000


def derive_seed(base_seed: int, tag: str, index: int) -> int:
    """Counter-based child seed: ``SeedSequence([base_seed, crc32(tag), index])``."""
    ss = np.random.SeedSequence([int(base_seed), zlib.crc32(tag.encode()), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class TrainConfig:
    iterations: int = 2500
    learning_rate: float = 1e-4
    decay_factor: float = 1.0
    decay_start: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    mu: float = DEFAULT_MU
    epsilon_scale: float = DEFAULT_EPSILON
    alpha1: float = DEFAULT_ALPHA1
    alpha2: float = DEFAULT_ALPHA2
    poincare_period: int = 100
    poincare_mode: str = "estimate"
    poincare_value: Optional[float] = None
    quadrature: str = "p1"
    points: Optional[int] = 2000
    cells_per_axis: Optional[Sequence[int]] = None
    loss_kind: str = FOSLS
    seed: int = 0
    log_period: int = 1
    fine_nodes: Optional[int] = None
    record_errors: bool = True
    checkpoint_period: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError("decay factor must lie in (0, 1]")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        for name in ("eps_adam", "mu", "epsilon_scale", "alpha1", "alpha2"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.poincare_period < 1 or self.log_period < 1:
            raise ConfigurationError("periods must be positive integers")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.poincare_mode not in POINCARE_MODES:
            raise ConfigurationError(f"poincare_mode must be one of {POINCARE_MODES}")
        if self.poincare_mode == "fixed" and not (self.poincare_value and self.poincare_value > 0):
            raise ConfigurationError("poincare_mode 'fixed' needs a positive poincare_value")
        try:
            QuadratureKind(self.quadrature)
        except ValueError:
            raise ConfigurationError(f"unknown quadrature {self.quadrature!r}; choose mc, p1 or trapezoid") from None

    def learning_rate_at(self, k: int) -> float:
        if self.decay_start is None or k <= self.decay_start:
            return self.learning_rate
        return self.learning_rate * self.decay_factor ** (k - self.decay_start)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dc_fields(self)}
        if out["cells_per_axis"] is not None:
            out["cells_per_axis"] = list(out["cells_per_axis"])
        return out


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, state: AdamState, grad, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; returns ``(theta, state)`` without mutating the inputs."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise InvalidArgumentError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, moments {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


@dataclass
class DiscreteSolution:
    net: Network
    lifting: Lifting
    coefficients: Coefficients
    poincare: float
    problem_id: str = ""

    def _fields_chunk(self, x):
        s = spanning_sample(self.net, self.lifting, x)
        d = x.shape[1]
        cq = self.coefficients.flux_matrix(s.tau_values.shape[1], d)
        cu = self.coefficients.c_u
        return {
            "u": s.phi @ cu,
            "grad_u": cu @ s.grad_phi,
            "q": s.tau_values @ cq,
            "div_q": s.div_tau.reshape(s.div_tau.shape[0], -1) @ cq.ravel(),
        }

    def fields(self, x) -> dict:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        parts = [self._fields_chunk(x[i:i + _EVAL_CHUNK]) for i in range(0, x.shape[0], _EVAL_CHUNK)]
        return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}

    def u(self, x):
        return self.fields(x)["u"]

    def grad_u(self, x):
        return self.fields(x)["grad_u"]

    def q(self, x):
        return self.fields(x)["q"]

    def div_q(self, x):
        return self.fields(x)["div_q"]

    def coefficients_dict(self) -> dict:
        return {
            "problem": self.problem_id,
            "poincare": self.poincare,
            "c_u": self.coefficients.c_u.tolist(),
            "c_q": self.coefficients.c_q.tolist(),
        }


@dataclass
class HistoryRecord:
    iteration: int
    train_loss: float
    val_loss: float = math.nan
    err_u_H1k: float = math.nan
    err_q_Hdivk: float = math.nan
    err_total: float = math.nan
    lr: float = math.nan
    poincare: float = math.nan
    grad_norm: float = math.nan
    wall_ms: float = math.nan
    ratio: float = math.nan
    standard_ratio: float = math.nan

    def row(self) -> list:
        return [getattr(self, c) for c in HISTORY_COLUMNS]


@dataclass
class TrainState:
    net: Network
    adam: AdamState
    iteration: int = 0
    poincare: Optional[PoincareEstimate] = None
    history: List[HistoryRecord] = field(default_factory=list)
    poincare_log: List[PoincareEstimate] = field(default_factory=list)


@dataclass
class TrainResult:
    solution: DiscreteSolution
    history: List[HistoryRecord]
    poincare_log: List[PoincareEstimate]
    state: TrainState


# -- pointwise losses and residual cotangents ------------------------------------------


def _combine(sample: SpanningSample, c: Coefficients):
    d = sample.points.shape[1]
    cq = c.flux_matrix(sample.tau_values.shape[1], d)
    grad_u = c.c_u @ sample.grad_phi
    q = sample.tau_values @ cq
    div_q = sample.div_tau.reshape(sample.div_tau.shape[0], -1) @ cq.ravel()
    return grad_u, q, div_q, cq


def fosls_residuals(sample: SpanningSample, c: Coefficients, kappa, f, poincare: float):
    """``R1 = kappa^{1/2} grad u + kappa^{-1/2} q`` (N, d) and ``R2 = sqrt(2) C (div q - f)`` (N,)."""
    grad_u, q, div_q, _ = _combine(sample, c)
    sk = np.sqrt(np.asarray(kappa, dtype=float))[:, None]
    r1 = sk * grad_u + q / sk
    r2 = math.sqrt(2.0) * poincare * (div_q - np.asarray(f, dtype=float))
    return r1, r2


def fosls_loss_pointwise(sample: SpanningSample, c: Coefficients, kappa, f, poincare: float) -> np.ndarray:
    """Integrand ``|R1|^2 + |R2|^2`` at every sample point."""
    r1, r2 = fosls_residuals(sample, c, kappa, f, poincare)
    return np.sum(r1 * r1, axis=1) + r2 * r2


def _fosls_cotangent(sample, c: Coefficients, kappa, poincare, bar_r1, bar_r2) -> SampleCotangent:
    """Pull residual adjoints back to the spanning-function fields (c frozen)."""
    d = sample.points.shape[1]
    cq = c.flux_matrix(sample.tau_values.shape[1], d)
    sk = np.sqrt(np.asarray(kappa, dtype=float))[:, None]
    grad_phi = (sk * bar_r1)[:, None, :] * c.c_u[None, :, None]
    tau = (bar_r1 / sk) @ cq.T
    div_tau = (math.sqrt(2.0) * poincare) * bar_r2[:, None, None] * cq[None, :, :]
    return SampleCotangent(grad_phi=grad_phi, tau_values=tau, div_tau=div_tau)


def deep_ritz_loss(net: Network, lifting: Lifting, rule: QuadratureRule, c_u, kappa, f) -> float:
    """Quadrature of ``1/2 kappa |grad u|^2 - f u`` for ``u = sum_j c_j phi_j``; ``kappa``, ``f`` are callables."""
    x = rule.points
    s = spanning_sample(net, lifting, x)
    return _ritz_value(s, np.asarray(c_u, dtype=float), kappa(x), np.asarray(f(x), dtype=float), rule.weights)


def _ritz_value(sample, c_u, kappa, f, weights) -> float:
    u = sample.phi @ c_u
    gu = c_u @ sample.grad_phi
    return float(weights @ (0.5 * kappa * np.sum(gu * gu, axis=1) - f * u))


def _ritz_cotangent(sample, c_u, kappa, f, weights) -> SampleCotangent:
    gu = c_u @ sample.grad_phi
    grad_phi = (weights * kappa)[:, None, None] * gu[:, None, :] * c_u[None, :, None]
    phi = -(weights * f)[:, None] * c_u[None, :]
    return SampleCotangent(phi=phi, grad_phi=grad_phi)


def envelope_gradient(
    net: Network,
    problem: ProblemSpec,
    rule: QuadratureRule,
    c_star: Coefficients,
    poincare: float,
    loss_kind: str = FOSLS,
    sample: Optional[SpanningSample] = None,
):
    """Gradient of the quadrature loss in the network parameters with ``c_star`` and the constant frozen."""
    x = rule.points
    if sample is None:
        sample = spanning_sample(net, problem.lifting, x)
    kappa = problem.kappa(x)
    f = np.asarray(problem.source(x), dtype=float)
    w = rule.weights
    if loss_kind == FOSLS:
        r1, r2 = fosls_residuals(sample, c_star, kappa, f, poincare)
        cot = _fosls_cotangent(sample, c_star, kappa, poincare, 2.0 * w[:, None] * r1, 2.0 * w * r2)
    elif loss_kind == DEEP_RITZ:
        cot = _ritz_cotangent(sample, c_star.c_u, kappa, f, w)
    else:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    return backprop_parameter_gradient(net, problem.lifting, x, cot, sample=sample)


# -- quadrature sampling ----------------------------------------------------------------


def make_rule_sampler(problem: ProblemSpec, config: TrainConfig) -> Callable[[int], QuadratureRule]:
    """Map a seed to a fresh quadrature rule of the configured kind and size."""
    box = problem.box
    kind = QuadratureKind(config.quadrature)
    if kind is QuadratureKind.STRATIFIED_P1:
        if config.cells_per_axis is not None:
            cells = [int(c) for c in config.cells_per_axis]
        elif box.dim == 1 and config.points:
            if config.points % 2:
                raise ConfigurationError("the P1 rule uses two points per cell; points must be even")
            cells = [config.points // 2]
        else:
            raise ConfigurationError("P1 quadrature in d > 1 needs cells_per_axis")
        part = partition_uniform(box, cells)
        return lambda seed: sample_p1(part, seed)
    if kind is QuadratureKind.MONTE_CARLO:
        if not config.points:
            raise ConfigurationError("Monte Carlo quadrature needs points")
        return lambda seed: sample_mc(box, config.points, seed)
    nodes = config.cells_per_axis or [config.points] * box.dim
    rule = trapezoid_rule(box, list(nodes))
    return lambda seed: rule


# -- training loop ----------------------------------------------------------------------


def _poincare_constant(problem: ProblemSpec, config: TrainConfig, estimate: Optional[PoincareEstimate]) -> float:
    if config.poincare_mode == "fixed":
        return float(config.poincare_value)
    if config.poincare_mode == "reference":
        if problem.poincare_reference is None:
            raise ConfigurationError(f"problem {problem.name} has no reference Poincare constant")
        return float(problem.poincare_reference)
    return estimate.running_max


def _inner_solve(net, problem, config, rule, sample, poincare):
    x = rule.points
    kappa = problem.kappa(x)
    f = np.asarray(problem.source(x), dtype=float)
    if config.loss_kind == FOSLS:
        system = assemble_from_sample(sample, kappa, f, rule.weights, poincare, rule.fingerprint)
        c = solve_ls(scale(system, config.epsilon_scale), config.mu)
        loss = float(rule.weights @ fosls_loss_pointwise(sample, c, kappa, f, poincare))
    else:
        rs = assemble_ritz(sample, kappa, f, rule.weights)
        c_u = solve_ritz(rs, config.mu, config.epsilon_scale)
        c = Coefficients(c_u, np.zeros(sample.n_q))
        loss = rs.energy(c_u)
    return c, loss


def _record(k, loss, lr, poincare, grad_norm, wall_ms, evaluator, sol, loss_kind) -> HistoryRecord:
    rec = HistoryRecord(k, loss, lr=lr, poincare=poincare, grad_norm=grad_norm, wall_ms=wall_ms)
    if evaluator is None:
        return rec
    fl = sol.fields(evaluator.rule.points)
    if loss_kind == FOSLS:
        rep = evaluator.report(fl, poincare)
        rec.val_loss = rep.loss_fine
        rec.err_u_H1k, rec.err_q_Hdivk, rec.err_total = rep.rel_u, rep.rel_q, rep.rel_total
        rec.ratio = rep.ratio if rep.ratio is not None else math.nan
        rec.standard_ratio = rep.standard_ratio if rep.standard_ratio is not None else math.nan
    else:
        rec.val_loss = evaluator.ritz_energy(fl["u"], fl["grad_u"])
        rec.err_u_H1k = evaluator.potential_error(fl["grad_u"])
    return rec


def train(
    problem: ProblemSpec,
    config: TrainConfig,
    net: Network,
    evaluator: Optional[FineEvaluator] = None,
    on_checkpoint: Optional[Callable[[int, DiscreteSolution], None]] = None,
) -> TrainResult:
    """Run ``config.iterations`` stochastic steps and finish with a least-squares solve on a fresh rule."""
    if evaluator is None and config.record_errors and problem.exact is not None:
        evaluator = FineEvaluator.for_problem(problem, config.fine_nodes)
    sampler = make_rule_sampler(problem, config)
    state = TrainState(net, AdamState.zeros(net.n_params))
    K = config.iterations

    for k in range(K + 1):
        t0 = time.perf_counter()
        seed = derive_seed(config.seed, "quadrature", k)
        try:
            rule = sampler(seed)
            sample = spanning_sample(state.net, problem.lifting, rule.points)
            if config.poincare_mode == "estimate" and (state.poincare is None or k % config.poincare_period == 0):
                x = rule.points
                ritz = assemble_ritz(sample, problem.kappa(x), np.zeros(x.shape[0]), rule.weights)
                D_u = np.sqrt(np.diag(ritz.A) + config.epsilon_scale)
                est = estimate_poincare(
                    ritz.A, mass_from_sample(sample, rule.weights), D_u,
                    config.alpha1, config.alpha2, k, state.poincare,
                )
                state.poincare = est
                state.poincare_log.append(est)
            C = _poincare_constant(problem, config, state.poincare)
            c, loss = _inner_solve(state.net, problem, config, rule, sample, C)
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite training loss ({loss})", k, seed)
            sol = DiscreteSolution(state.net, problem.lifting, c, C, problem.name)
            if k == K:
                grad_norm = math.nan
            else:
                g = envelope_gradient(state.net, problem, rule, c, C, config.loss_kind, sample).vector()
                grad_norm = float(np.linalg.norm(g))
                if not math.isfinite(grad_norm):
                    raise TrainingAborted("non-finite parameter gradient", k, seed)
        except (NumericalError, AssemblyError, NonFiniteSampleError, FloatingPointError) as exc:
            if isinstance(exc, TrainingAborted):
                raise
            raise TrainingAborted(f"{type(exc).__name__}: {exc}", k, seed) from exc

        lr = config.learning_rate_at(k)
        logged = evaluator if (k % config.log_period == 0 or k == K) else None
        wall = (time.perf_counter() - t0) * 1e3
        state.history.append(_record(k, loss, lr, C, grad_norm, wall, logged, sol, config.loss_kind))
        if on_checkpoint and config.checkpoint_period and (k % config.checkpoint_period == 0 or k == K):
            on_checkpoint(k, sol)
        if k == K:
            break
        theta, state.adam = adam_step(
            state.net.parameters(), state.adam, g, lr, config.beta1, config.beta2, config.eps_adam
        )
        try:
            state.net = state.net.with_parameters(theta)
        except InvalidArgumentError as exc:
            raise TrainingAborted(f"invalid parameter update: {exc}", k, seed) from exc
        state.iteration = k + 1

    return TrainResult(sol, state.history, state.poincare_log, state)


# -- variance diagnostics ---------------------------------------------------------------


@dataclass
class VarianceReport:
    variances: np.ndarray
    mean_gradient: np.ndarray
    max_variance: float
    loss_fine: float
    c_grad: float = math.nan
    c_grad_components: Optional[np.ndarray] = None
    bound: float = math.nan
    ratio: float = math.nan
    component_bound_ok: bool = True
    energy_gap: float = math.nan
    resamples: int = 0

    def summary(self) -> dict:
        return {
            "max_variance": self.max_variance,
            "loss_fine": self.loss_fine,
            "c_grad": self.c_grad,
            "bound": self.bound,
            "ratio": self.ratio,
            "component_bound_ok": bool(self.component_bound_ok),
            "energy_gap": self.energy_gap,
            "resamples": self.resamples,
        }


def fine_coefficients(net: Network, problem: ProblemSpec, poincare: float, fine_rule: QuadratureRule,
                      loss_kind: str = FOSLS, mu: float = DEFAULT_MU, epsilon: float = DEFAULT_EPSILON) -> Coefficients:
    """Inner minimiser on a deterministic rule (the probe's fixed ``c*``)."""
    x = fine_rule.points
    s = spanning_sample(net, problem.lifting, x)
    kappa, f = problem.kappa(x), np.asarray(problem.source(x), dtype=float)
    if loss_kind == FOSLS:
        system = assemble_from_sample(s, kappa, f, fine_rule.weights, poincare)
        return solve_ls(scale(system, epsilon), mu)
    c_u = solve_ritz(assemble_ritz(s, kappa, f, fine_rule.weights), mu, epsilon)
    return Coefficients(c_u, np.zeros(s.n_q))


def residual_parameter_jacobian(net: Network, problem: ProblemSpec, x, c: Coefficients, poincare: float) -> np.ndarray:
    """Per-point derivatives of each residual component in the parameters, shape (N, d + 1, P)."""
    x = np.atleast_2d(x)
    s = spanning_sample(net, problem.lifting, x)
    kappa = problem.kappa(x)
    n, d = x.shape
    out = np.empty((n, d + 1, net.n_params))
    for r in range(d + 1):
        bar_r1 = np.zeros((n, d))
        bar_r2 = np.zeros(n)
        if r < d:
            bar_r1[:, r] = 1.0
        else:
            bar_r2[:] = 1.0
        cot = _fosls_cotangent(s, c, kappa, poincare, bar_r1, bar_r2)
        out[:, r, :] = backprop_parameter_gradient(net, problem.lifting, x, cot, sample=s, per_point=True).vector()
    return out


def gradient_variance_probe(
    net: Network,
    problem: ProblemSpec,
    config: TrainConfig,
    poincare: float,
    resamples: int = 100,
    seed: int = 0,
    fine_rule: Optional[QuadratureRule] = None,
    c_grad_rules: Optional[int] = None,
) -> VarianceReport:
    """Empirical per-component variance of the stochastic gradient at fixed parameters and ``c*``.

    For the least-squares loss the bound ``4 C_grad^2 |Omega| L`` is evaluated, with
    ``C_grad`` the largest per-point norm of the residual parameter derivatives seen
    over the drawn rules (``c_grad_rules`` limits how many rules enter that maximum).
    """
    if resamples < 2:
        raise InvalidArgumentError("need at least two resamples")
    if fine_rule is None:
        fine_rule = trapezoid_rule(problem.box, [100_001 if problem.dim == 1 else 401] * problem.dim)
    kind = config.loss_kind
    c = fine_coefficients(net, problem, poincare, fine_rule, kind, config.mu, config.epsilon_scale)
    sampler = make_rule_sampler(problem, config)
    grads, rules = [], []
    for m in range(resamples):
        rule = sampler(derive_seed(seed, "probe", m))
        rules.append(rule)
        grads.append(envelope_gradient(net, problem, rule, c, poincare, kind).vector())
    G = np.array(grads)
    var = G.var(axis=0, ddof=1)
    x = fine_rule.points
    s = spanning_sample(net, problem.lifting, x)
    kappa, f = problem.kappa(x), np.asarray(problem.source(x), dtype=float)
    if kind == DEEP_RITZ:
        energy = _ritz_value(s, c.c_u, kappa, f, fine_rule.weights)
        gap = math.nan
        if problem.exact is not None:
            gu = np.asarray(problem.exact.grad_u(x))
            # Ritz energy of the exact solution is -1/2 ||u*||_kappa^2
            gap = energy + 0.5 * float(fine_rule.weights @ (kappa * np.sum(gu * gu, axis=1)))
        return VarianceReport(var, G.mean(axis=0), float(var.max()), energy, energy_gap=gap, resamples=resamples)

    loss = float(fine_rule.weights @ fosls_loss_pointwise(s, c, kappa, f, poincare))
    use = rules if c_grad_rules is None else rules[: max(1, int(c_grad_rules))]
    comp = np.zeros(net.n_params)
    for rule in use:
        jac = residual_parameter_jacobian(net, problem, rule.points, c, poincare)
        comp = np.maximum(comp, np.sqrt(np.sum(jac * jac, axis=1)).max(axis=0))
    c_grad = float(comp.max())
    vol = problem.box.volume
    bound = 4.0 * c_grad**2 * vol * loss
    comp_ok = bool(np.all(var <= 4.0 * comp**2 * vol * loss))
    return VarianceReport(
        var, G.mean(axis=0), float(var.max()), loss,
        c_grad=c_grad, c_grad_components=comp, bound=bound,
        ratio=float(var.max() / bound) if bound > 0 else math.nan,
        component_bound_ok=comp_ok, resamples=resamples,
    )
