"""Hierarchical random-effects model: transforms, priors, gradients, likelihood.

Model structure: subject j's log-scale random effects alpha_j are i.i.d.
N(mu_alpha, Sigma_alpha); mu_alpha has a standard normal prior; Sigma_alpha
has a marginally non-informative inverse-Wishart prior IW(D+1, 4*diag(1/a))
whose hyperparameters a_d are inverse-gamma IG(1/2, 1).

Two working parameterizations are supported:

* the full transformed vector theta = (alpha_{1:J}, mu_alpha, vech(C*),
  log a), where C* stores the Cholesky factor of Sigma_alpha with
  log-transformed diagonal (column-major lower triangle), and the prior
  carries the change-of-variable Jacobians; and
* the split form theta1 = (alpha_{1:J}, mu_alpha, log a) with
  theta2 = Sigma_alpha kept as a matrix, whose exact conditional given
  everything else is inverse-Wishart -- the basis of the hybrid variational
  scheme.

All gradients are analytic.  The likelihood evaluator compiles a dataset +
model specification into flat index arrays once, so each evaluation is a
handful of vectorized passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, multigammaln

from . import lba
from .data import Dataset
from .modelspec import PARAM_CLASSES, ModelSpec

CHOL_PIVOT_MIN = 1e-12
CHOL_JITTER = 1e-10

# Inverse-gamma hyperprior on each a_d: shape 1/2, scale 1.
IG_SHAPE = 0.5
IG_SCALE = 1.0


class HierDomainError(ValueError):
    """Invalid hierarchical-model state."""


def safe_cholesky(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; adds one shot of jitter for near-singular input."""
    try:
        chol = np.linalg.cholesky(mat)
        if np.all(np.diag(chol) > CHOL_PIVOT_MIN):
            return chol
    except np.linalg.LinAlgError:
        pass
    jittered = mat + CHOL_JITTER * np.eye(mat.shape[0])
    try:
        chol = np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError:
        raise HierDomainError("matrix is not positive definite (jitter did not help)") from None
    if np.any(np.diag(chol) <= CHOL_PIVOT_MIN):
        raise HierDomainError("Cholesky pivot below tolerance after jitter")
    return chol


def vech_indices(d: int):
    """Row/column indices of the lower triangle in column-major (vech) order."""
    cols, rows = np.triu_indices(d)
    return rows, cols


def chol_to_vech(chol: np.ndarray) -> np.ndarray:
    """Pack a lower-triangular Cholesky factor, log-transforming the diagonal."""
    d = chol.shape[0]
    rows, cols = vech_indices(d)
    out = chol[rows, cols].astype(float).copy()
    diag = rows == cols
    if np.any(np.diag(chol) <= 0):
        raise HierDomainError("Cholesky diagonal must be positive")
    out[diag] = np.log(out[diag])
    return out


def vech_to_chol(vech: np.ndarray, d: int) -> np.ndarray:
    rows, cols = vech_indices(d)
    chol = np.zeros((d, d))
    chol[rows, cols] = vech
    idx = np.arange(d)
    chol[idx, idx] = np.exp(np.clip(np.diag(chol), -300.0, 300.0))
    return chol


@dataclass
class GroupState:
    """Natural-scale group level: mean, covariance and IW hyperparameters."""

    mu_alpha: np.ndarray
    sigma_alpha: np.ndarray
    a: np.ndarray


@dataclass(frozen=True)
class GvbLayout:
    """Index bookkeeping for the full transformed parameter vector."""

    n_subjects: int
    d_alpha: int

    @property
    def n_vech(self) -> int:
        return self.d_alpha * (self.d_alpha + 1) // 2

    @property
    def dim(self) -> int:
        return self.n_subjects * self.d_alpha + self.d_alpha + self.n_vech + self.d_alpha

    def split(self, theta: np.ndarray):
        J, D = self.n_subjects, self.d_alpha
        if theta.shape != (self.dim,):
            raise HierDomainError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        alpha = theta[:J * D].reshape(J, D)
        mu = theta[J * D:J * D + D]
        vech = theta[J * D + D:J * D + D + self.n_vech]
        log_a = theta[J * D + D + self.n_vech:]
        return alpha, mu, vech, log_a

    def join(self, alpha, mu, vech, log_a) -> np.ndarray:
        return np.concatenate([np.asarray(alpha).ravel(), mu, vech, log_a])

    def pack_state(self, alpha: np.ndarray, state: GroupState) -> np.ndarray:
        chol = safe_cholesky(state.sigma_alpha)
        return self.join(alpha, state.mu_alpha, chol_to_vech(chol), np.log(state.a))

    def unpack_state(self, theta: np.ndarray):
        alpha, mu, vech, log_a = self.split(theta)
        chol = vech_to_chol(vech, self.d_alpha)
        return alpha, GroupState(mu_alpha=mu.copy(), sigma_alpha=chol @ chol.T, a=np.exp(log_a))


@dataclass(frozen=True)
class HybridLayout:
    """Index bookkeeping for the split parameterization (no vech block)."""

    n_subjects: int
    d_alpha: int

    @property
    def dim(self) -> int:
        return self.n_subjects * self.d_alpha + 2 * self.d_alpha

    def split(self, theta1: np.ndarray):
        J, D = self.n_subjects, self.d_alpha
        if theta1.shape != (self.dim,):
            raise HierDomainError(f"theta1 has shape {theta1.shape}, expected ({self.dim},)")
        alpha = theta1[:J * D].reshape(J, D)
        mu = theta1[J * D:J * D + D]
        log_a = theta1[J * D + D:]
        return alpha, mu, log_a

    def join(self, alpha, mu, log_a) -> np.ndarray:
        return np.concatenate([np.asarray(alpha).ravel(), mu, log_a])


@dataclass(frozen=True)
class IwParams:
    nu: float
    psi: np.ndarray

    def validate(self):
        d = self.psi.shape[0]
        if self.nu <= d - 1:
            raise HierDomainError(f"inverse-Wishart df {self.nu} <= dimension - 1")


# ---------------------------------------------------------------------------
# Density building blocks

def mvn_logpdf_chol(x: np.ndarray, mu: np.ndarray, chol: np.ndarray) -> float:
    """N(x | mu, C C^T) log density; ``x`` may be a (J, D) stack of rows."""
    x = np.atleast_2d(x)
    d = chol.shape[0]
    u = solve_triangular(chol, (x - mu).T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    quad = np.sum(u * u)
    n = x.shape[0]
    return float(-0.5 * n * d * np.log(2 * np.pi) - 0.5 * n * logdet - 0.5 * quad)


def invwishart_logpdf(sigma_chol: np.ndarray, nu: float, psi: np.ndarray) -> float:
    """Normalized IW(Sigma | nu, Psi) log density, Sigma given by its Cholesky factor."""
    d = psi.shape[0]
    psi_chol = safe_cholesky(psi)
    logdet_sigma = 2.0 * np.sum(np.log(np.diag(sigma_chol)))
    logdet_psi = 2.0 * np.sum(np.log(np.diag(psi_chol)))
    x = solve_triangular(sigma_chol, psi_chol, lower=True)
    trace = float(np.sum(x * x))
    return float(0.5 * nu * logdet_psi - 0.5 * nu * d * np.log(2.0) - multigammaln(0.5 * nu, d)
                 - 0.5 * (nu + d + 1) * logdet_sigma - 0.5 * trace)


def inverse_gamma_logpdf(a: np.ndarray, shape: float = IG_SHAPE, scale: float = IG_SCALE):
    a = np.asarray(a, dtype=float)
    return shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(a) - scale / a


def conditional_iw_params(alpha: np.ndarray, mu_alpha: np.ndarray, a: np.ndarray) -> IwParams:
    """Exact conditional of the group covariance given effects, mean and a.

    Conjugacy of the IW(D+1, 4 diag(1/a)) prior with J normal likelihood terms
    gives IW(D + J + 1, sum_j (alpha_j - mu)(alpha_j - mu)^T + 4 diag(1/a)).
    """
    alpha = np.atleast_2d(alpha)
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise HierDomainError("hyperparameters a must be positive")
    J, D = alpha.shape
    centered = alpha - mu_alpha
    psi = centered.T @ centered + np.diag(4.0 / a)
    return IwParams(nu=float(D + J + 1), psi=psi)


def sample_invwishart(iw: IwParams, rng: np.random.Generator) -> np.ndarray:
    """Draw Sigma ~ IW(nu, Psi) by a Bartlett construction on Psi^{-1}.

    W = (L Q)(L Q)^T ~ Wishart(nu, Psi^{-1}) with L the Cholesky factor of
    Psi^{-1} and Q lower-triangular Bartlett; Sigma = W^{-1} is assembled
    from triangular solves only.
    """
    iw.validate()
    d = iw.psi.shape[0]
    psi_chol = safe_cholesky(iw.psi)
    # chol(Psi^{-1}) = (psi_chol^{-T} with lower re-factorization): use the
    # identity Psi^{-1} = psi_chol^{-T} psi_chol^{-1} and solve against Q.
    q = np.zeros((d, d))
    df = iw.nu - np.arange(d)
    q[np.diag_indices(d)] = np.sqrt(rng.chisquare(df))
    lower = np.tril_indices(d, k=-1)
    q[lower] = rng.normal(size=len(lower[0]))
    # M = chol(Psi)^{-T} Q  satisfies M M^T ~ Wishart(nu, Psi^{-1})
    # m is a general square root of Psi^{-1} (upper-triangular inverse times
    # Bartlett lower), so a full inverse is required here
    m = solve_triangular(psi_chol.T, q, lower=False)
    inv_m = np.linalg.inv(m)
    sigma = inv_m.T @ inv_m
    return 0.5 * (sigma + sigma.T)


# ---------------------------------------------------------------------------
# Prior over the fully transformed vector (with Jacobians) and its gradient

def _shared_group_terms(alpha, mu, chol, log_a):
    """Pieces used by every prior variant (one factorization per call)."""
    D = chol.shape[0]
    a = np.exp(log_a)
    inv_chol = solve_triangular(chol, np.eye(D), lower=True)
    sigma_inv = inv_chol.T @ inv_chol
    centered = alpha - mu
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return a, inv_chol, sigma_inv, centered, logdet_sigma


def _group_log_density(alpha, mu, log_a, a, sigma_inv, centered, logdet_sigma):
    """log[prod_j N(alpha_j | mu, Sigma) N(mu | 0, I) IW(Sigma | D+1, 4 diag(1/a))
    prod_d IG(a_d | 1/2, 1) a_d]; the IW scale is diagonal so no second
    factorization is needed."""
    J, D = centered.shape
    nu0 = D + 1.0
    quad = float(np.sum((centered @ sigma_inv) * centered))
    logp = -0.5 * J * D * np.log(2 * np.pi) - 0.5 * J * logdet_sigma - 0.5 * quad
    logp += float(-0.5 * D * np.log(2 * np.pi) - 0.5 * mu @ mu)
    logdet_psi = float(np.sum(np.log(4.0 / a)))
    trace = float(np.sum(4.0 / a * np.diag(sigma_inv)))
    logp += (0.5 * nu0 * logdet_psi - 0.5 * nu0 * D * np.log(2.0) - multigammaln(0.5 * nu0, D)
             - 0.5 * (nu0 + D + 1.0) * logdet_sigma - 0.5 * trace)
    logp += float(np.sum(inverse_gamma_logpdf(a) + log_a))
    return logp


def prior_tilde_with_grad(theta: np.ndarray, layout: GvbLayout):
    """Log prior of the transformed vector (with Jacobians) and its gradient."""
    alpha, mu, vech, log_a = layout.split(theta)
    J, D = layout.n_subjects, layout.d_alpha
    chol = vech_to_chol(vech, D)
    a, inv_chol, sigma_inv, centered, logdet_sigma = _shared_group_terms(alpha, mu, chol, log_a)
    dpos = np.arange(1, D + 1)
    logp = _group_log_density(alpha, mu, log_a, a, sigma_inv, centered, logdet_sigma)
    logp += D * np.log(2.0) + float(np.sum((D - dpos + 2) * np.log(np.diag(chol))))

    g_alpha = -(centered @ sigma_inv)
    g_mu = sigma_inv @ centered.sum(axis=0) - mu
    # trace terms: d(-1/2 tr(X Sigma^{-1}))/dC = Sigma^{-1} X C^{-T}
    scatter = centered.T @ centered
    m_mat = sigma_inv @ (scatter + np.diag(4.0 / a)) @ inv_chol.T
    nu0 = D + 1.0
    diag_coeff = -(J + nu0 + D + 1.0) + (D - dpos + 2.0)
    g_chol = np.tril(m_mat)
    diag = np.diag_indices(D)
    g_chol[diag] = m_mat[diag] * np.diag(chol) + diag_coeff
    rows, cols = vech_indices(D)
    g_vech = g_chol[rows, cols]
    g_log_a = -(nu0 + 1.0) / 2.0 + (2.0 * np.diag(sigma_inv) + 1.0) / a
    return logp, layout.join(g_alpha, g_mu, g_vech, g_log_a)


def log_prior_tilde(theta: np.ndarray, layout: GvbLayout) -> float:
    return prior_tilde_with_grad(theta, layout)[0]


def grad_log_prior_tilde(theta: np.ndarray, layout: GvbLayout) -> np.ndarray:
    return prior_tilde_with_grad(theta, layout)[1]


# ---------------------------------------------------------------------------
# Split parameterization: log p(theta1, Sigma) and log p(Sigma | theta1, y)

def hybrid_prior_terms(theta1: np.ndarray, sigma: np.ndarray, layout: HybridLayout,
                       iw: IwParams | None = None):
    """All split-form terms in one pass.

    Returns (log p(theta1, Sigma), its theta1 gradient,
    log p(Sigma | theta1, y), its theta1 gradient).  Pass ``iw`` when the
    conditional parameters are already known for this theta1.
    """
    alpha, mu, log_a = layout.split(theta1)
    D = layout.d_alpha
    chol = safe_cholesky(sigma)
    a, inv_chol, sigma_inv, centered, logdet_sigma = _shared_group_terms(alpha, mu, chol, log_a)
    log_joint = _group_log_density(alpha, mu, log_a, a, sigma_inv, centered, logdet_sigma)
    g_alpha = -(centered @ sigma_inv)
    g_mu = sigma_inv @ centered.sum(axis=0) - mu
    g_log_a = -(D + 2.0) / 2.0 + (2.0 * np.diag(sigma_inv) + 1.0) / a
    grad_joint = layout.join(g_alpha, g_mu, g_log_a)

    if iw is None:
        iw = conditional_iw_params(alpha, mu, a)
    psi_chol = safe_cholesky(iw.psi)
    inv_psi_chol = solve_triangular(psi_chol, np.eye(D), lower=True)
    psi_inv = inv_psi_chol.T @ inv_psi_chol
    logdet_psi = 2.0 * float(np.sum(np.log(np.diag(psi_chol))))
    trace = float(np.sum(iw.psi * sigma_inv))
    log_cond = (0.5 * iw.nu * logdet_psi - 0.5 * iw.nu * D * np.log(2.0)
                - multigammaln(0.5 * iw.nu, D)
                - 0.5 * (iw.nu + D + 1.0) * logdet_sigma - 0.5 * trace)
    coeff = iw.nu * psi_inv - sigma_inv
    gc_alpha = centered @ coeff
    gc_mu = -coeff @ centered.sum(axis=0)
    gc_log_a = -2.0 * (iw.nu * np.diag(psi_inv) - np.diag(sigma_inv)) / a
    grad_cond = layout.join(gc_alpha, gc_mu, gc_log_a)
    return log_joint, grad_joint, log_cond, grad_cond


def log_joint_split(theta1: np.ndarray, sigma: np.ndarray, layout: HybridLayout) -> float:
    return hybrid_prior_terms(theta1, sigma, layout)[0]


def grad_theta1_log_joint_split(theta1: np.ndarray, sigma: np.ndarray,
                                layout: HybridLayout) -> np.ndarray:
    return hybrid_prior_terms(theta1, sigma, layout)[1]


def log_conditional_sigma(theta1: np.ndarray, sigma: np.ndarray, layout: HybridLayout) -> float:
    return hybrid_prior_terms(theta1, sigma, layout)[2]


def grad_theta1_log_conditional_sigma(theta1: np.ndarray, sigma: np.ndarray,
                                      layout: HybridLayout) -> np.ndarray:
    return hybrid_prior_terms(theta1, sigma, layout)[3]


# ---------------------------------------------------------------------------
# Likelihood evaluator

class LbaLikelihood:
    """Dataset + model spec compiled to flat arrays for fast evaluation.

    ``logp_and_grad`` evaluates sum_j sum_i log LBA(y_ji | alpha_j) and its
    gradient with respect to the (J, D) matrix of random effects, chaining
    through the log transform and b = c + A.
    """

    def __init__(self, dataset: Dataset, spec: ModelSpec):
        self.spec = spec
        self.d_alpha = spec.d_alpha
        self.n_subjects = dataset.n_subjects
        self.subject_ids = [s.subject for s in dataset.subjects]
        n_acc = dataset.schema.n_acc

        idx_blocks = {cls: [] for cls in PARAM_CLASSES}
        rts, winners = [], []
        for j, subj in enumerate(dataset.subjects):
            n = subj.n_trials
            if n == 0:
                continue
            idx = spec.cell_index_arrays(subj.factors)
            for cls in PARAM_CLASSES:
                block = idx[cls]
                idx_blocks[cls].append(np.where(block >= 0, block + j * spec.d_alpha, -1))
            rts.append(subj.rt)
            winners.append(subj.response)

        if rts:
            self.idx = {cls: np.concatenate(idx_blocks[cls], axis=0) for cls in PARAM_CLASSES}
            self.rt = np.concatenate(rts)
            self.winner = np.concatenate(winners).astype(np.int64)
        else:
            self.idx = {cls: np.zeros((0, n_acc), dtype=np.int64) for cls in PARAM_CLASSES}
            self.rt = np.zeros(0)
            self.winner = np.zeros(0, dtype=np.int64)
        self.n_trials = self.rt.shape[0]
        self._s_free = self.idx["s"] >= 0
        self._batch_cache: dict[int, dict] = {}

    def _batch_arrays(self, n_batch: int) -> dict:
        """Index arrays tiled across a batch of parameter draws (cached)."""
        cached = self._batch_cache.get(n_batch)
        if cached is not None:
            return cached
        J, D = self.n_subjects, self.d_alpha
        offsets = (np.arange(n_batch) * J * D)[:, None, None]
        tiled = {}
        for cls in PARAM_CLASSES:
            idx = self.idx[cls]
            big = np.where(idx[None] >= 0, idx[None] + offsets, -1)
            tiled[cls] = big.reshape(n_batch * idx.shape[0], idx.shape[1])
        cached = {
            "idx": tiled,
            "s_free": tiled["s"] >= 0,
            "rt": np.tile(self.rt, n_batch),
            "winner": np.tile(self.winner, n_batch),
            "row_sample": np.repeat(np.arange(n_batch), self.n_trials),
        }
        self._batch_cache[n_batch] = cached
        return cached

    def logp_and_grad_batch(self, alpha: np.ndarray):
        """Evaluate a batch of draws at once: alpha (N, J, D).

        Returns (logp (N,), grad (N, J, D), floored (N,)).
        """
        n_batch = alpha.shape[0]
        J, D = self.n_subjects, self.d_alpha
        if self.n_trials == 0:
            return np.zeros(n_batch), np.zeros((n_batch, J, D)), np.zeros(n_batch, dtype=int)
        arr = self._batch_arrays(n_batch)
        z = np.exp(np.clip(np.asarray(alpha, dtype=float).reshape(-1), -700.0, 700.0))
        idx = arr["idx"]
        zc = z[idx["c"]]
        zA = z[idx["A"]]
        zv = z[idx["v"]]
        zs = np.where(arr["s_free"], z[np.maximum(idx["s"], 0)], 1.0)
        ztau = z[idx["tau"]]
        t = arr["rt"][:, None] - ztau
        logp, grads, floored = lba.race_logp_and_grads(zc + zA, zA, zv, zs, t, arr["winner"])
        total = np.zeros(n_batch * J * D)
        weights = {
            "c": grads["b"] * zc,
            "A": (grads["b"] + grads["A"]) * zA,
            "v": grads["v"] * zv,
            "s": np.where(arr["s_free"], grads["s"] * zs, 0.0),
            "tau": grads["tau"] * ztau,
        }
        for cls, w in weights.items():
            ix = idx[cls].ravel()
            wf = w.ravel()
            keep = ix >= 0
            total += np.bincount(ix[keep], weights=wf[keep], minlength=total.size)
        logp_s = np.bincount(arr["row_sample"], weights=logp, minlength=n_batch)
        floored_s = np.bincount(arr["row_sample"], weights=floored.astype(float),
                                minlength=n_batch)
        return logp_s, total.reshape(n_batch, J, D), floored_s.astype(int)

    def _natural(self, alpha_flat: np.ndarray):
        z = np.exp(np.clip(alpha_flat, -700.0, 700.0))
        zc = z[self.idx["c"]]
        zA = z[self.idx["A"]]
        zv = z[self.idx["v"]]
        zs = np.where(self._s_free, z[np.maximum(self.idx["s"], 0)], 1.0)
        ztau = z[self.idx["tau"]]
        return zc, zA, zv, zs, ztau

    def logp(self, alpha: np.ndarray):
        """Returns (log likelihood, number of floored trials)."""
        if self.n_trials == 0:
            return 0.0, 0
        alpha_flat = np.asarray(alpha, dtype=float).ravel()
        zc, zA, zv, zs, ztau = self._natural(alpha_flat)
        t = self.rt[:, None] - ztau
        logp, floored = lba.race_logp(zc + zA, zA, zv, zs, t, self.winner)
        return float(logp.sum()), int(floored.sum())

    def logp_and_grad(self, alpha: np.ndarray):
        """Returns (log likelihood, gradient (J, D), number of floored trials)."""
        J, D = self.n_subjects, self.d_alpha
        if self.n_trials == 0:
            return 0.0, np.zeros((J, D)), 0
        alpha_flat = np.asarray(alpha, dtype=float).ravel()
        zc, zA, zv, zs, ztau = self._natural(alpha_flat)
        t = self.rt[:, None] - ztau
        logp, grads, floored = lba.race_logp_and_grads(zc + zA, zA, zv, zs, t, self.winner)

        total = np.zeros(J * D)
        weights = {
            "c": grads["b"] * zc,
            "A": (grads["b"] + grads["A"]) * zA,
            "v": grads["v"] * zv,
            "s": np.where(self._s_free, grads["s"] * zs, 0.0),
            "tau": grads["tau"] * ztau,
        }
        for cls, w in weights.items():
            ix = self.idx[cls].ravel()
            wf = w.ravel()
            keep = ix >= 0
            total += np.bincount(ix[keep], weights=wf[keep], minlength=J * D)
        return float(logp.sum()), total.reshape(J, D), int(floored.sum())


def log_likelihood_and_grad(dataset: Dataset, spec: ModelSpec, alpha: np.ndarray):
    """One-shot evaluation; prefer holding an LbaLikelihood for repeated use."""
    return LbaLikelihood(dataset, spec).logp_and_grad(alpha)


# ---------------------------------------------------------------------------
# Optimization targets consumed by the variational engine

@dataclass
class GvbTarget:
    """Log joint (likelihood + transformed prior) over the full vector."""

    likelihood: object   # needs .logp_and_grad(alpha) and .n_subjects/.d_alpha
    layout: GvbLayout

    @property
    def dim(self) -> int:
        return self.layout.dim

    def log_joint_and_grad(self, theta: np.ndarray):
        alpha, mu, vech, log_a = self.layout.split(theta)
        if not np.all(np.isfinite(theta)):
            return -np.inf, np.zeros(self.dim), {"n_floored": 0}
        loglik, g_alpha, n_floored = self.likelihood.logp_and_grad(alpha)
        log_prior, grad = prior_tilde_with_grad(theta, self.layout)
        logp = loglik + log_prior
        grad[:alpha.size] += g_alpha.ravel()
        if not np.isfinite(logp):
            return -np.inf, np.zeros(self.dim), {"n_floored": n_floored}
        return logp, grad, {"n_floored": n_floored}

    def log_joint_and_grad_batch(self, thetas: np.ndarray):
        """Batch evaluation: thetas (N, dim) -> (logps, grads (N, dim), info)."""
        n_batch = thetas.shape[0]
        J, D = self.layout.n_subjects, self.layout.d_alpha
        logps = np.full(n_batch, -np.inf)
        grads = np.zeros((n_batch, self.dim))
        alphas = thetas[:, :J * D].reshape(n_batch, J, D)
        finite = np.all(np.isfinite(thetas), axis=1)
        if hasattr(self.likelihood, "logp_and_grad_batch"):
            logliks, g_alphas, floored = self.likelihood.logp_and_grad_batch(alphas)
        else:
            logliks = np.empty(n_batch)
            g_alphas = np.empty((n_batch, J, D))
            floored = np.zeros(n_batch, dtype=int)
            for i in range(n_batch):
                logliks[i], g_alphas[i], floored[i] = self.likelihood.logp_and_grad(alphas[i])
        for i in range(n_batch):
            if not finite[i]:
                continue
            log_prior, grad = prior_tilde_with_grad(thetas[i], self.layout)
            logp = logliks[i] + log_prior
            if np.isfinite(logp):
                grad[:J * D] += g_alphas[i].ravel()
                logps[i] = logp
                grads[i] = grad
        return logps, grads, {"n_floored": int(floored.sum())}


@dataclass
class HybridTarget:
    """Split-parameterization terms for the hybrid variational scheme."""

    likelihood: object
    layout: HybridLayout

    @property
    def dim(self) -> int:
        return self.layout.dim

    def conditional(self, theta1: np.ndarray) -> IwParams:
        alpha, mu, log_a = self.layout.split(theta1)
        with np.errstate(over="ignore"):
            a = np.exp(log_a)
        return conditional_iw_params(alpha, mu, a)

    def sample_sigma(self, iw: IwParams, rng: np.random.Generator) -> np.ndarray:
        return sample_invwishart(iw, rng)

    def log_terms(self, theta1: np.ndarray, sigma: np.ndarray):
        """Returns (log p(y,theta1,theta2), grad, log p(theta2|theta1,y), grad_cond, info).

        ``grad`` is the theta1 gradient of log p(y | theta1, theta2)
        + log p(theta1, theta2); ``grad_cond`` is the theta1 gradient of the
        conditional log density (the control-variate term).
        """
        alpha, mu, log_a = self.layout.split(theta1)
        if not np.all(np.isfinite(theta1)):
            z = np.zeros(self.dim)
            return -np.inf, z, 0.0, z, {"n_floored": 0}
        loglik, g_alpha, n_floored = self.likelihood.logp_and_grad(alpha)
        log_prior, grad, log_cond, grad_cond = hybrid_prior_terms(theta1, sigma, self.layout)
        log_joint = loglik + log_prior
        grad[:alpha.size] += g_alpha.ravel()
        return log_joint, grad, log_cond, grad_cond, {"n_floored": n_floored}

    def log_terms_batch(self, theta1s: np.ndarray, rng: np.random.Generator):
        """Batch version: samples Sigma per draw internally.

        Returns (log_joints, grads (N, dim), log_conds, grad_conds (N, dim), info).
        """
        n_batch = theta1s.shape[0]
        J, D = self.layout.n_subjects, self.layout.d_alpha
        log_joints = np.full(n_batch, -np.inf)
        log_conds = np.zeros(n_batch)
        grads = np.zeros((n_batch, self.dim))
        grad_conds = np.zeros((n_batch, self.dim))
        alphas = theta1s[:, :J * D].reshape(n_batch, J, D)
        finite = np.all(np.isfinite(theta1s), axis=1)
        if hasattr(self.likelihood, "logp_and_grad_batch"):
            logliks, g_alphas, floored = self.likelihood.logp_and_grad_batch(alphas)
        else:
            logliks = np.empty(n_batch)
            g_alphas = np.empty((n_batch, J, D))
            floored = np.zeros(n_batch, dtype=int)
            for i in range(n_batch):
                logliks[i], g_alphas[i], floored[i] = self.likelihood.logp_and_grad(alphas[i])
        for i in range(n_batch):
            if not finite[i]:
                continue
            try:
                iw = self.conditional(theta1s[i])
                sigma = sample_invwishart(iw, rng)
                log_prior, grad, log_cond, grad_cond = hybrid_prior_terms(
                    theta1s[i], sigma, self.layout, iw=iw)
            except HierDomainError:
                continue
            logp = logliks[i] + log_prior
            if not np.isfinite(logp):
                continue
            grad[:J * D] += g_alphas[i].ravel()
            log_joints[i] = logp
            grads[i] = grad
            log_conds[i] = log_cond
            grad_conds[i] = grad_cond
        return log_joints, grads, log_conds, grad_conds, {"n_floored": int(floored.sum())}
