"""Fixed-form variational optimization with a factor-structured Gaussian family.

The approximating family is N(mu, B B^T + D^2) with B a p x r loading matrix
(upper triangle of its leading r x r block pinned to zero for rotational
identifiability) and D = diag(d).  Lower-bound and gradient estimates use the
reparameterization theta = mu + B eps1 + d * eps2 with standard normal eps.

Two estimators are provided: the plain one, which needs the target's log
joint density and gradient over the full transformed vector, and the hybrid
one, which draws the group covariance from its exact inverse-Wishart
conditional and includes the conditional's score as a control variate.

Step sizes are per-coordinate ADADELTA; the search stops when the m-window
moving average of the lower-bound estimates has not improved for k
consecutive iterations.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import hierarchical as hier
from .data import Dataset
from .modelspec import ModelSpec

ADADELTA_DECAY = 0.95
ADADELTA_EPS = 1e-7
STOP_WINDOW = 200
STOP_PATIENCE = 200
DIVERGENCE_PATIENCE = 50


class VbDivergenceError(RuntimeError):
    """Optimization produced non-finite parameters or estimates."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def loading_mask(p: int, r: int) -> np.ndarray:
    """Free-entry mask for B: upper triangle of the leading r x r block is fixed at 0."""
    mask = np.ones((p, r), dtype=bool)
    ru = min(p, r)
    for i in range(ru):
        mask[i, i + 1:] = False
    return mask


@dataclass
class VariationalParams:
    mu: np.ndarray
    b: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.b = np.asarray(self.b, dtype=float) * loading_mask(*np.shape(self.b))
        self.d = np.asarray(self.d, dtype=float)

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def r(self) -> int:
        return self.b.shape[1]

    def copy(self) -> "VariationalParams":
        return VariationalParams(self.mu.copy(), self.b.copy(), self.d.copy())

    def pack(self) -> np.ndarray:
        return np.concatenate([self.mu, self.b.ravel(), self.d])

    @classmethod
    def unpack(cls, flat: np.ndarray, p: int, r: int) -> "VariationalParams":
        return cls(flat[:p], flat[p:p + p * r].reshape(p, r), flat[p + p * r:])

    def covariance(self) -> np.ndarray:
        return self.b @ self.b.T + np.diag(self.d ** 2)

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(np.sum(self.b ** 2, axis=1) + self.d ** 2)


class FactorCovOps:
    """Applications of (B B^T + D^2)^{-1} and its log-determinant in O(p r + r^3).

    Uses the Woodbury identity
    (B B^T + D^2)^{-1} = D^{-2} - D^{-2} B (I + B^T D^{-2} B)^{-1} B^T D^{-2}
    and the matrix determinant lemma for the log-determinant.
    """

    def __init__(self, b: np.ndarray, d: np.ndarray):
        d = np.asarray(d, dtype=float)
        if np.any(d == 0.0):
            raise ValueError("Woodbury form requires every diagonal entry d_i != 0")
        self.b = np.asarray(b, dtype=float)
        with np.errstate(over="ignore"):
            self.d2 = d ** 2
        r = self.b.shape[1]
        self.b_over_d2 = self.b / self.d2[:, None]
        k = np.eye(r) + self.b.T @ self.b_over_d2
        self._k_factor = cho_factor(k, lower=True)
        self._logdet_k = 2.0 * np.sum(np.log(np.diag(self._k_factor[0])))

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        """x may be a vector (p,) or a matrix of columns (p, n)."""
        inner = cho_solve(self._k_factor, self.b_over_d2.T @ x)
        d2 = self.d2[:, None] if x.ndim > 1 else self.d2
        return x / d2 - self.b_over_d2 @ inner

    def logdet(self) -> float:
        return float(np.sum(np.log(self.d2)) + self._logdet_k)


def draw_reparam(lam: VariationalParams, rng: np.random.Generator):
    """One reparameterized draw: returns (theta, eps1, eps2)."""
    eps1 = rng.standard_normal(lam.r)
    eps2 = rng.standard_normal(lam.p)
    return lam.mu + lam.b @ eps1 + lam.d * eps2, eps1, eps2


def log_q_and_grad(lam: VariationalParams, theta: np.ndarray, ops: FactorCovOps | None = None):
    """Gaussian log density of the factor family and its gradient in theta."""
    ops = ops or FactorCovOps(lam.b, lam.d)
    centered = theta - lam.mu
    siginv_centered = ops.apply_inverse(centered)
    logq = -0.5 * lam.p * np.log(2 * np.pi) - 0.5 * ops.logdet() - 0.5 * centered @ siginv_centered
    return float(logq), -siginv_centered


@dataclass
class GradLambda:
    mu: np.ndarray
    b: np.ndarray
    d: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.mu, self.b.ravel(), self.d])


def _assemble(g_sum, ge1_sum, ge2_sum, n, mask):
    return GradLambda(mu=g_sum / n, b=(ge1_sum / n) * mask, d=ge2_sum / n)


def _batch_logq(lam: VariationalParams, thetas: np.ndarray, ops: FactorCovOps):
    centered = (thetas - lam.mu).T            # (p, N)
    siginv_centered = ops.apply_inverse(centered)
    quad = np.sum(centered * siginv_centered, axis=0)
    logq = -0.5 * lam.p * np.log(2 * np.pi) - 0.5 * ops.logdet() - 0.5 * quad
    return logq, -siginv_centered.T           # (N,), (N, p)


def _batch_draw(lam: VariationalParams, n_mc: int, rng):
    # row-major fill matches the sequential draw_reparam stream exactly
    eps = rng.standard_normal((n_mc, lam.r + lam.p))
    eps1, eps2 = eps[:, :lam.r], eps[:, lam.r:]
    thetas = lam.mu + eps1 @ lam.b.T + eps2 * lam.d
    return thetas, eps1, eps2


def estimate_lb_and_grad(target, lam: VariationalParams, n_mc: int, rng: np.random.Generator):
    """Reparameterized lower-bound and gradient estimate for a plain target.

    ``target`` provides ``log_joint_and_grad(theta)`` (and optionally a
    ``log_joint_and_grad_batch`` fast path).  Samples with a non-finite log
    joint contribute the floor value to the lower-bound mean and nothing to
    the gradient.
    """
    p, r = lam.p, lam.r
    ops = FactorCovOps(lam.b, lam.d)
    mask = loading_mask(p, r)
    if hasattr(target, "log_joint_and_grad_batch"):
        thetas, eps1, eps2 = _batch_draw(lam, n_mc, rng)
        logh, grad_h, info = target.log_joint_and_grad_batch(thetas)
        logq, grad_q = _batch_logq(lam, thetas, ops)
        ok = np.isfinite(logh)
        g = np.where(ok[:, None], grad_h - grad_q, 0.0)
        lb = float(np.sum(np.where(ok, logh - logq, -np.inf))) if not np.all(ok) \
            else float(np.sum(logh - logq))
        grad = _assemble(g.sum(axis=0), g.T @ eps1, np.sum(g * eps2, axis=0), n_mc, mask)
        return lb / n_mc, grad, {"n_bad": int(np.sum(~ok)),
                                 "n_floored": info.get("n_floored", 0)}
    lb = 0.0
    g_sum, ge1_sum, ge2_sum = np.zeros(p), np.zeros((p, r)), np.zeros(p)
    n_bad = n_floored = 0
    for _ in range(n_mc):
        theta, eps1, eps2 = draw_reparam(lam, rng)
        logh, grad_h, info = target.log_joint_and_grad(theta)
        logq, grad_q = log_q_and_grad(lam, theta, ops)
        n_floored += info.get("n_floored", 0)
        if not np.isfinite(logh):
            n_bad += 1
            lb += -np.inf
            continue
        lb += logh - logq
        g = grad_h - grad_q
        g_sum += g
        ge1_sum += np.outer(g, eps1)
        ge2_sum += g * eps2
    grad = _assemble(g_sum, ge1_sum, ge2_sum, n_mc, mask)
    return lb / n_mc, grad, {"n_bad": n_bad, "n_floored": n_floored}


def estimate_lb_and_grad_hybrid(target, lam: VariationalParams, n_mc: int,
                                rng: np.random.Generator, control_variate: bool = True):
    """Hybrid estimator: the group covariance is drawn from its exact conditional.

    Per sample, theta1 = u(eps; lambda), Sigma ~ IW(conditional(theta1)); the
    lower-bound term is log p(y, theta1, Sigma) - log q(theta1)
    - log p(Sigma | theta1, y), and the gradient includes the conditional's
    score as a control variate (toggleable).
    """
    p, r = lam.p, lam.r
    ops = FactorCovOps(lam.b, lam.d)
    mask = loading_mask(p, r)
    if hasattr(target, "log_terms_batch"):
        theta1s, eps1, eps2 = _batch_draw(lam, n_mc, rng)
        log_joint, grad_joint, log_cond, grad_cond, info = target.log_terms_batch(theta1s, rng)
        logq, grad_q = _batch_logq(lam, theta1s, ops)
        ok = np.isfinite(log_joint)
        g = grad_joint - grad_q
        if control_variate:
            g = g - grad_cond
        g = np.where(ok[:, None], g, 0.0)
        lb = float(np.sum(np.where(ok, log_joint - logq - log_cond, -np.inf))) \
            if not np.all(ok) else float(np.sum(log_joint - logq - log_cond))
        grad = _assemble(g.sum(axis=0), g.T @ eps1, np.sum(g * eps2, axis=0), n_mc, mask)
        return lb / n_mc, grad, {"n_bad": int(np.sum(~ok)),
                                 "n_floored": info.get("n_floored", 0)}
    lb = 0.0
    g_sum, ge1_sum, ge2_sum = np.zeros(p), np.zeros((p, r)), np.zeros(p)
    n_bad = n_floored = 0
    for _ in range(n_mc):
        theta1, eps1, eps2 = draw_reparam(lam, rng)
        try:
            iw = target.conditional(theta1)
            sigma = target.sample_sigma(iw, rng)
            log_joint, grad_joint, log_cond, grad_cond, info = target.log_terms(theta1, sigma)
        except hier.HierDomainError:
            n_bad += 1
            lb += -np.inf
            continue
        logq, grad_q = log_q_and_grad(lam, theta1, ops)
        n_floored += info.get("n_floored", 0)
        if not np.isfinite(log_joint):
            n_bad += 1
            lb += -np.inf
            continue
        lb += log_joint - logq - log_cond
        g = grad_joint - grad_q
        if control_variate:
            g = g - grad_cond
        g_sum += g
        ge1_sum += np.outer(g, eps1)
        ge2_sum += g * eps2
    grad = _assemble(g_sum, ge1_sum, ge2_sum, n_mc, mask)
    return lb / n_mc, grad, {"n_bad": n_bad, "n_floored": n_floored}


# ---------------------------------------------------------------------------
# ADADELTA and the stopping rule

@dataclass
class AdadeltaState:
    e_g2: np.ndarray
    e_delta2: np.ndarray
    decay: float = ADADELTA_DECAY
    eps: float = ADADELTA_EPS

    @classmethod
    def fresh(cls, n: int, decay: float = ADADELTA_DECAY, eps: float = ADADELTA_EPS):
        return cls(e_g2=np.zeros(n), e_delta2=np.zeros(n), decay=decay, eps=eps)


def adadelta_update(state: AdadeltaState, lam_flat: np.ndarray, grad_flat: np.ndarray):
    """One ascent step; returns (state', lambda')."""
    v = state.decay
    e_g2 = v * state.e_g2 + (1.0 - v) * grad_flat ** 2
    rho = np.sqrt(state.e_delta2 + state.eps) / np.sqrt(e_g2 + state.eps)
    delta = rho * grad_flat
    e_delta2 = v * state.e_delta2 + (1.0 - v) * delta ** 2
    return replace(state, e_g2=e_g2, e_delta2=e_delta2), lam_flat + delta


class LowerBoundTrace:
    """Per-iteration lower-bound estimates with a windowed stopping rule.

    ``push`` returns True when the running maximum of the m-window moving
    average has not improved for k consecutive evaluable iterations.
    """

    def __init__(self, window: int = STOP_WINDOW, patience: int = STOP_PATIENCE):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.patience = patience
        self.values: list[float] = []
        self.moving_avg: list[float] = []
        self._buf: deque[float] = deque(maxlen=window)
        self.best_avg = -np.inf
        self.best_iteration: int | None = None
        self._stall = 0

    def push(self, lb: float) -> bool:
        self.values.append(float(lb))
        self._buf.append(float(lb))
        if len(self._buf) < self.window:
            self.moving_avg.append(np.nan)
            return False
        avg = float(np.mean(self._buf))
        self.moving_avg.append(avg)
        if avg > self.best_avg:
            self.best_avg = avg
            self.best_iteration = len(self.values)
            self._stall = 0
        else:
            self._stall += 1
        return self._stall >= self.patience

    def __len__(self):
        return len(self.values)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "lb_estimate", "moving_average"])
            for i, (v, m) in enumerate(zip(self.values, self.moving_avg), start=1):
                writer.writerow([i, f"{v:.10g}", "" if np.isnan(m) else f"{m:.10g}"])


def stopping_check(values, window: int = STOP_WINDOW, patience: int = STOP_PATIENCE):
    """Stop index (1-based) for a complete lower-bound sequence, or None."""
    trace = LowerBoundTrace(window=window, patience=patience)
    for i, v in enumerate(values, start=1):
        if trace.push(v):
            return i
    return None


# ---------------------------------------------------------------------------
# Full optimization loop

@dataclass
class VbConfig:
    method: str = "hybrid"             # "gvb" or "hybrid"
    n_factors: int = 20
    n_mc: int = 10
    max_iters: int = 10_000
    window: int = STOP_WINDOW
    patience: int = STOP_PATIENCE
    adadelta_decay: float = ADADELTA_DECAY
    adadelta_eps: float = ADADELTA_EPS
    divergence_patience: int = DIVERGENCE_PATIENCE
    seed: int = 0
    init: VariationalParams | None = None
    control_variate: bool = True


@dataclass
class VbResult:
    lam: VariationalParams             # at the best moving-average iteration
    lam_final: VariationalParams
    trace: LowerBoundTrace
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_moving_average(self) -> float:
        finite = [m for m in self.trace.moving_avg if np.isfinite(m)]
        return finite[-1] if finite else -np.inf


def init_lambda_hierarchical(dataset: Dataset, spec: ModelSpec, method: str,
                             n_factors: int, rng: np.random.Generator) -> VariationalParams:
    """Heuristic starting point keeping early likelihood evaluations off the floor.

    Per-subject blocks: log 1 for c, A and free s cells, log 2 / log 1 for
    matching / mismatching drift cells, log(0.9 * min subject RT) for tau.
    The group-mean block is the average of the subject blocks; covariance
    blocks start near scaled-identity; loadings are small random values.
    """
    D = spec.d_alpha
    J = dataset.n_subjects
    subject_blocks = np.zeros((J, D))
    v_lay = spec.layouts["v"]
    import itertools
    v_init = {}
    factors = [spec.schema.factor(f) for f in v_lay.factors]
    for cell, combo in enumerate(itertools.product(*(range(len(f.levels)) for f in factors))):
        ix = v_lay.alpha_index_of_cell(cell)
        if ix < 0:
            continue
        mismatch = any(f.kind == "match" and lvl == 1 for f, lvl in zip(factors, combo))
        v_init[ix] = np.log(1.0) if mismatch else np.log(2.0)
    tau_lay = spec.layouts["tau"]
    for j, subj in enumerate(dataset.subjects):
        block = np.zeros(D)
        for ix, val in v_init.items():
            block[ix] = val
        min_rt = float(np.min(subj.rt)) if subj.n_trials else 0.5
        block[tau_lay.offset:tau_lay.offset + tau_lay.n_free] = np.log(0.9 * min_rt)
        subject_blocks[j] = block
    group_mean = subject_blocks.mean(axis=0) if J else np.zeros(D)

    if method == "gvb":
        layout = hier.GvbLayout(n_subjects=J, d_alpha=D)
        vech = hier.chol_to_vech(0.5 * np.eye(D))
        mu = layout.join(subject_blocks, group_mean, vech, np.zeros(D))
    else:
        layout = hier.HybridLayout(n_subjects=J, d_alpha=D)
        mu = layout.join(subject_blocks, group_mean, np.zeros(D))
    p = mu.shape[0]
    b = rng.normal(scale=0.01, size=(p, n_factors))
    return VariationalParams(mu=mu, b=b, d=np.full(p, 0.01))


def make_target(dataset: Dataset, spec: ModelSpec, method: str):
    likelihood = hier.LbaLikelihood(dataset, spec)
    J, D = likelihood.n_subjects, likelihood.d_alpha
    if method == "gvb":
        return hier.GvbTarget(likelihood, hier.GvbLayout(n_subjects=J, d_alpha=D))
    if method == "hybrid":
        return hier.HybridTarget(likelihood, hier.HybridLayout(n_subjects=J, d_alpha=D))
    raise ValueError(f"unknown method {method!r}; expected 'gvb' or 'hybrid'")


def optimize_target(target, config: VbConfig, init: VariationalParams,
                    rng: np.random.Generator, hybrid: bool) -> VbResult:
    lam = init.copy()
    p, r = lam.p, lam.r
    state = AdadeltaState.fresh(p + p * r + p, decay=config.adadelta_decay,
                                eps=config.adadelta_eps)
    trace = LowerBoundTrace(window=config.window, patience=config.patience)
    best_lam = lam.copy()
    have_best = False
    consecutive_bad = 0
    n_floored_total = 0
    for iteration in range(config.max_iters):
        if hybrid:
            lb, grad, info = estimate_lb_and_grad_hybrid(
                target, lam, config.n_mc, rng, control_variate=config.control_variate)
        else:
            lb, grad, info = estimate_lb_and_grad(target, lam, config.n_mc, rng)
        n_floored_total += info.get("n_floored", 0)
        if not np.isfinite(lb):
            consecutive_bad += 1
            if consecutive_bad >= config.divergence_patience:
                raise VbDivergenceError(
                    f"lower bound non-finite for {consecutive_bad} consecutive iterations",
                    trace=trace)
        else:
            consecutive_bad = 0
        prev_best = trace.best_iteration
        should_stop = trace.push(lb)
        if trace.best_iteration != prev_best:
            best_lam = lam.copy()
            have_best = True
        if should_stop:
            break
        state, flat = adadelta_update(state, lam.pack(), grad.pack())
        if not np.all(np.isfinite(flat)):
            raise VbDivergenceError("variational parameters became non-finite", trace=trace)
        lam = VariationalParams.unpack(flat, p, r)
    diagnostics = {
        "n_iterations": len(trace),
        "stopped_early": len(trace) < config.max_iters,
        "best_iteration": trace.best_iteration,
        "best_moving_average": trace.best_avg,
        "n_floored_trials": n_floored_total,
    }
    return VbResult(lam=best_lam if have_best else lam.copy(),
                    lam_final=lam, trace=trace, diagnostics=diagnostics)


def run_vb(dataset: Dataset, spec: ModelSpec, config: VbConfig) -> VbResult:
    """Fit the hierarchical model variationally; see VbConfig for knobs."""
    rng = np.random.default_rng(config.seed)
    target = make_target(dataset, spec, config.method)
    init = config.init if config.init is not None else init_lambda_hierarchical(
        dataset, spec, config.method, config.n_factors, rng)
    if init.p != target.dim:
        raise ValueError(f"initialization has dimension {init.p}, target needs {target.dim}")
    return optimize_target(target, config, init, rng, hybrid=config.method == "hybrid")


def posterior_summary(result: VbResult, dataset: Dataset, spec: ModelSpec, method: str) -> dict:
    """Posterior means/SDs of the group mean and subject effects under q."""
    J, D = dataset.n_subjects, spec.d_alpha
    lam = result.lam
    sd = lam.marginal_sd()
    names = spec.alpha_names()
    mu_block = slice(J * D, J * D + D)
    return {
        "alpha_names": names,
        "group_mean": {"mean": lam.mu[mu_block].tolist(), "sd": sd[mu_block].tolist()},
        "subjects": {
            subj.subject: {
                "mean": lam.mu[j * D:(j + 1) * D].tolist(),
                "sd": sd[j * D:(j + 1) * D].tolist(),
            }
            for j, subj in enumerate(dataset.subjects)
        },
    }
