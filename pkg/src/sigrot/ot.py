"""Entropic optimal transport solvers in the log domain.

Balanced mode solves

    min_{gamma in Pi(mu, nu)} <gamma, C> - eps * H(gamma),
    H(gamma) = -sum_ij gamma_ij (log gamma_ij - 1),

via Sinkhorn scaling. Unbalanced mode replaces the hard marginal constraints
with generalized KL penalties tau1*KL(gamma 1 || mu) + tau2*KL(gamma^T 1 || nu),
which turns the scaling exponents into tau/(tau+eps).

Updates run on log potentials, so tiny eps never overflows. Each forward solve
can record a tape of per-iteration potentials; `sinkhorn_backward` replays the
tape in reverse to produce the exact gradient of a scalar loss through the
unrolled iterations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DomainError, NoForwardTape, NonPositiveMarginal

# Below this epsilon a tape-free solve warm-starts through an epsilon schedule.
ANNEAL_BELOW = 0.01
ANNEAL_FACTORS = (32.0, 16.0, 8.0, 4.0, 2.0)
ANNEAL_ITERS = 60


class SolverMode(enum.Enum):
    BALANCED = "balanced"
    UNBALANCED = "unbalanced"


@dataclass(frozen=True)
class SolverConfig:
    """Solver hyperparameters.

    `early_stop=False` always runs exactly `max_iters` iterations, which keeps
    the unrolled computation graph (and therefore its gradient) a fixed-depth
    function of the cost matrix.
    """

    epsilon: float = 0.05
    tau1: float = 0.5
    tau2: float = 0.5
    max_iters: int = 2000
    tolerance: float = 1e-9
    mode: SolverMode = SolverMode.UNBALANCED
    early_stop: bool = True

    def __post_init__(self):
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise DomainError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise DomainError("tau1 and tau2 must be positive")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if not (self.tolerance > 0):
            raise DomainError("tolerance must be positive")


@dataclass
class SolverTape:
    """Per-iteration log potentials recorded by a forward solve."""

    log_kernel: np.ndarray  # -C/eps
    epsilon: float
    exp_row: float
    exp_col: float
    log_u: list = field(default_factory=list)
    log_v: list = field(default_factory=list)
    log_kv: list = field(default_factory=list)  # log(K v^{t-1}) per iteration
    log_ktu: list = field(default_factory=list)  # log(K^T u^t) per iteration


@dataclass
class TransportPlan:
    """Solver output. Residuals are L1 distances of plan marginals to mu/nu."""

    plan: np.ndarray
    iterations_used: int
    row_residual: float
    col_residual: float
    converged: bool
    tape: SolverTape | None = None


def _lse_rows(mat: np.ndarray) -> np.ndarray:
    mx = mat.max(axis=1)
    out = np.log(np.exp(mat - mx[:, None]).sum(axis=1))
    out += mx
    return out


def _check_inputs(cost, mu, nu, balanced: bool):
    c = np.asarray(cost, dtype=np.float64)
    a = np.asarray(mu, dtype=np.float64)
    b = np.asarray(nu, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionMismatch(f"cost must be 2-D, got shape {c.shape}")
    if a.ndim != 1 or b.ndim != 1 or a.shape[0] != c.shape[0] or b.shape[0] != c.shape[1]:
        raise DimensionMismatch(
            f"marginal shapes {a.shape}/{b.shape} do not match cost {c.shape}"
        )
    if not np.all(np.isfinite(c)):
        raise DomainError("cost matrix must be finite")
    if np.any(a <= 0) or np.any(b <= 0):
        raise NonPositiveMarginal("marginals must be strictly positive")
    if balanced:
        if abs(float(a.sum()) - 1.0) > 1e-9 or abs(float(b.sum()) - 1.0) > 1e-9:
            raise DomainError("balanced marginals must each sum to 1 within 1e-9")
    return c, a, b


def _scaling_sweeps(m, log_mu, log_nu, exp_row, exp_col, log_u, log_v, n_iters):
    """Fixed number of scaling sweeps, no tape, no convergence checks."""
    for _ in range(n_iters):
        log_u = exp_row * (log_mu - _lse_rows(m + log_v[None, :]))
        log_v = exp_col * (log_nu - _lse_rows((m + log_u[:, None]).T))
    return log_u, log_v


def _annealed_init(c, log_mu, log_nu, cfg: SolverConfig, balanced: bool):
    """Warm-start potentials through a geometric epsilon schedule.

    Dual potentials eps*log_u are continuous in eps, so each stage rescales the
    previous stage's log potentials by eps_prev/eps_next. Pure initialization:
    the fixed point at the target epsilon is untouched.
    """
    log_u = np.zeros(c.shape[0])
    log_v = np.zeros(c.shape[1])
    eps_prev = None
    stages = [cfg.epsilon * f for f in ANNEAL_FACTORS] + [cfg.epsilon]
    for eps_k in stages:
        if eps_prev is not None:
            scale = eps_prev / eps_k
            log_u = log_u * scale
            log_v = log_v * scale
        if eps_k == cfg.epsilon:
            break
        if balanced:
            exp_row = exp_col = 1.0
        else:
            exp_row = cfg.tau1 / (cfg.tau1 + eps_k)
            exp_col = cfg.tau2 / (cfg.tau2 + eps_k)
        m_k = c / (-eps_k)
        log_u, log_v = _scaling_sweeps(
            m_k, log_mu, log_nu, exp_row, exp_col, log_u, log_v, ANNEAL_ITERS
        )
        eps_prev = eps_k
    return log_u, log_v


def _solve(cost, mu, nu, cfg: SolverConfig, balanced: bool, record_tape: bool) -> TransportPlan:
    c, a, b = _check_inputs(cost, mu, nu, balanced)
    eps = cfg.epsilon
    if balanced:
        exp_row = exp_col = 1.0
    else:
        exp_row = cfg.tau1 / (cfg.tau1 + eps)
        exp_col = cfg.tau2 / (cfg.tau2 + eps)
    m = c / (-eps)
    log_mu = np.log(a)
    log_nu = np.log(b)

    if not record_tape and eps < ANNEAL_BELOW:
        log_u, log_v = _annealed_init(c, log_mu, log_nu, cfg, balanced)
    else:
        log_u = np.zeros(c.shape[0])
        log_v = np.zeros(c.shape[1])

    tape = SolverTape(m, eps, exp_row, exp_col) if record_tape else None
    converged = False
    row_res = np.inf
    col_res = np.inf
    iterations = 0

    for it in range(cfg.max_iters):
        prev_u, prev_v = log_u, log_v
        log_kv = _lse_rows(m + log_v[None, :])
        log_u = exp_row * (log_mu - log_kv)
        log_ktu = _lse_rows((m + log_u[:, None]).T)
        log_v = exp_col * (log_nu - log_ktu)
        iterations = it + 1
        if record_tape:
            tape.log_u.append(log_u)
            tape.log_v.append(log_v)
            tape.log_kv.append(log_kv)
            tape.log_ktu.append(log_ktu)
        last = it == cfg.max_iters - 1
        if balanced:
            if cfg.early_stop or last:
                plan = np.exp(log_u[:, None] + m + log_v[None, :])
                row_res = float(np.abs(plan.sum(axis=1) - a).sum())
                col_res = float(np.abs(plan.sum(axis=0) - b).sum())
                if max(row_res, col_res) <= cfg.tolerance:
                    converged = True
                    if cfg.early_stop:
                        break
        else:
            delta = max(
                float(np.abs(log_u - prev_u).max()),
                float(np.abs(log_v - prev_v).max()),
            )
            if delta <= cfg.tolerance:
                converged = True
                if cfg.early_stop:
                    break
            elif last:
                converged = False

    plan = np.exp(log_u[:, None] + m + log_v[None, :])
    row_res = float(np.abs(plan.sum(axis=1) - a).sum())
    col_res = float(np.abs(plan.sum(axis=0) - b).sum())
    return TransportPlan(plan, iterations, row_res, col_res, converged, tape)


def sinkhorn_balanced(cost, mu, nu, cfg: SolverConfig, record_tape: bool = True) -> TransportPlan:
    """Balanced entropic plan between probability vectors mu and nu."""
    return _solve(cost, mu, nu, cfg, balanced=True, record_tape=record_tape)


def sinkhorn_unbalanced(cost, mu, nu, cfg: SolverConfig, record_tape: bool = True) -> TransportPlan:
    """Unbalanced entropic plan with KL marginal penalties tau1, tau2."""
    return _solve(cost, mu, nu, cfg, balanced=False, record_tape=record_tape)


def solve(cost, mu, nu, cfg: SolverConfig, record_tape: bool = True) -> TransportPlan:
    """Dispatch on cfg.mode."""
    balanced = cfg.mode is SolverMode.BALANCED
    return _solve(cost, mu, nu, cfg, balanced=balanced, record_tape=record_tape)


def transport_cost(plan, cost) -> float:
    """Frobenius inner product <plan, cost>."""
    p = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    c = np.asarray(cost, dtype=np.float64)
    if p.shape != c.shape:
        raise DimensionMismatch(f"plan shape {p.shape} != cost shape {c.shape}")
    return float(np.sum(p * c))


def sinkhorn_backward(result: TransportPlan, upstream) -> np.ndarray:
    """Gradient of a scalar loss with respect to the cost matrix.

    `upstream` is dLoss/dplan evaluated at `result.plan`. The chain rule is
    replayed backward through every recorded iteration: each logsumexp
    contributes its softmax weights, each potential update scales by the
    marginal-relaxation exponent, and the kernel map M = -C/eps converts the
    accumulated dLoss/dM into dLoss/dC.
    """
    tape = result.tape
    if tape is None:
        raise NoForwardTape("forward solve was run with record_tape=False")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != result.plan.shape:
        raise DimensionMismatch(f"upstream shape {g.shape} != plan shape {result.plan.shape}")

    m = tape.log_kernel
    n_iters = len(tape.log_u)
    # plan = exp(log_u + M + log_v); seed all three dependencies.
    p_up = g * result.plan
    g_m = p_up.copy()
    g_log_u = p_up.sum(axis=1)
    g_log_v = p_up.sum(axis=0)

    for k in range(n_iters - 1, -1, -1):
        # log_v^t = exp_col * (log_nu - log_ktu^t); log_ktu from logsumexp over rows of M^T + log_u^t
        g_c = -tape.exp_col * g_log_v
        w = np.exp(m + tape.log_u[k][:, None] - tape.log_ktu[k][None, :])
        g_m += w * g_c[None, :]
        g_log_u = g_log_u + w @ g_c
        # log_u^t = exp_row * (log_mu - log_kv^t); log_kv from logsumexp over cols of M + log_v^{t-1}
        g_r = -tape.exp_row * g_log_u
        log_v_prev = tape.log_v[k - 1] if k > 0 else np.zeros(m.shape[1])
        q = np.exp(m + log_v_prev[None, :] - tape.log_kv[k][:, None])
        g_m += q * g_r[:, None]
        g_log_v = q.T @ g_r
        g_log_u = np.zeros(m.shape[0])

    return g_m / (-tape.epsilon)
