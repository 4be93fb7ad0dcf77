"""Single-trial linear ballistic accumulator distributions, gradients and simulation.

Each accumulator starts a trial at a uniform random point k ~ U[0, A] and
races toward a threshold b with a drift rate drawn once per trial from
N(v, s^2).  The first accumulator to reach its threshold determines the
response; the observed response time is the winner's finishing time plus a
non-decision offset tau.  Finishing-time distributions are defective:
accumulators with a negative drift never finish, so the CDF saturates at
Phi(v / s).

All distribution kernels in this module work on *decision time* t (raw RT
minus tau) and broadcast over numpy arrays.  The public per-trial helpers
wrap them for scalar use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

SQRT_2PI = math.sqrt(2.0 * math.pi)

# Trials whose density underflows (or with rt <= tau) are floored at
# exp(LOG_FLOOR) with a zero gradient so stochastic-gradient iterations stay
# finite; callers receive a flag so incompatible data can be reported.
LOG_FLOOR = -700.0

# Below this start-point range the 1/A singularities are replaced by their
# (removable) A -> 0 limits.
A_DEGENERATE = 1e-10

# A simulated trial is redrawn while no accumulator has a positive drift;
# give up after this many redraws.
MAX_TRIAL_REDRAWS = 1_000_000


class LbaDomainError(ValueError):
    """Invalid accumulator parameters or outcome."""


@dataclass(frozen=True)
class AccumulatorParams:
    """Natural-scale parameters of one accumulator.

    b:   response threshold (must satisfy b >= A; upstream code guarantees
         this through the c = b - A parameterization)
    A:   upper bound of the uniform start-point distribution, A >= 0
    v:   mean drift rate
    s:   drift-rate standard deviation, s > 0
    tau: non-decision time in seconds, tau >= 0
    """

    b: float
    A: float
    v: float
    s: float
    tau: float

    def validate(self) -> None:
        vals = (self.b, self.A, self.v, self.s, self.tau)
        if not all(np.isfinite(vals)):
            raise LbaDomainError(f"non-finite accumulator parameters: {self}")
        if self.A < 0:
            raise LbaDomainError(f"start-point range A must be >= 0, got {self.A}")
        if self.b < self.A:
            raise LbaDomainError(f"threshold b={self.b} below start-point range A={self.A}")
        if self.s <= 0:
            raise LbaDomainError(f"drift-rate sd s must be > 0, got {self.s}")
        if self.tau < 0:
            raise LbaDomainError(f"non-decision time tau must be >= 0, got {self.tau}")


@dataclass(frozen=True)
class TrialOutcome:
    """One observed decision: 0-based winning accumulator and raw RT in seconds."""

    choice: int
    rt: float


@dataclass
class LbaGradient:
    """Gradient of a trial's log joint density w.r.t. each accumulator's parameters.

    Arrays are indexed by accumulator.  ``d_tau`` holds per-accumulator
    contributions; with the shared-tau convention the total tau gradient is
    ``d_tau.sum()``.  ``floored`` marks trials evaluated at the density floor
    (the gradient is then identically zero).
    """

    d_b: np.ndarray
    d_A: np.ndarray
    d_v: np.ndarray
    d_s: np.ndarray
    d_tau: np.ndarray
    floored: bool = False


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / SQRT_2PI


def _gfun(x):
    # g(x) = x * Phi(x) + phi(x); g' = Phi; strictly increasing and >= 0.
    return x * ndtr(x) + _phi(x)


def _ndtr_diff(x, y):
    # Phi(x) - Phi(y) without saturation: for large positive arguments Phi
    # rounds to 1, so switch to the complementary form there.
    return np.where(x + y > 0.0, ndtr(-y) - ndtr(-x), ndtr(x) - ndtr(y))


def _z_terms(b, A, v, s, t):
    """Standardized arguments of the finishing-time distribution.

    z1 = (b - t v) / (t s), z2 = A / (t s), w = z1 - z2.  Only valid for t > 0.
    """
    ts = t * s
    z1 = (b - t * v) / ts
    z2 = A / ts
    return z1, z2, z1 - z2, ts


def finish_cdf(b, A, v, s, t):
    """Defective CDF of one accumulator's finishing time at decision time t.

    Broadcasts over array inputs; returns 0 for t <= 0.
    """
    b, A, v, s, t = np.broadcast_arrays(*np.atleast_1d(b, A, v, s, t))
    out = np.zeros(b.shape, dtype=float)
    pos = t > 0
    if not np.any(pos):
        return out
    bp, Ap, vp, sp, tp = (x[pos] for x in (b, A, v, s, t))
    with np.errstate(all="ignore"):
        z1, z2, w, ts = _z_terms(bp, Ap, vp, sp, tp)
        surv = (ts / Ap) * (_gfun(z1) - _gfun(w))
        deg = Ap < A_DEGENERATE
        if np.any(deg):
            surv = np.where(deg, ndtr(z1), surv)
    out[pos] = 1.0 - np.clip(surv, 0.0, 1.0)
    return out


def finish_survival(b, A, v, s, t):
    """1 - finish_cdf, computed without cancellation of the leading terms."""
    b, A, v, s, t = np.broadcast_arrays(*np.atleast_1d(b, A, v, s, t))
    out = np.ones(b.shape, dtype=float)
    pos = t > 0
    if not np.any(pos):
        return out
    bp, Ap, vp, sp, tp = (x[pos] for x in (b, A, v, s, t))
    with np.errstate(all="ignore"):
        z1, z2, w, ts = _z_terms(bp, Ap, vp, sp, tp)
        surv = (ts / Ap) * (_gfun(z1) - _gfun(w))
        deg = Ap < A_DEGENERATE
        if np.any(deg):
            surv = np.where(deg, ndtr(z1), surv)
    out[pos] = np.clip(surv, 0.0, 1.0)
    return out


def finish_pdf(b, A, v, s, t):
    """Defective finishing-time density at decision time t (0 for t <= 0)."""
    b, A, v, s, t = np.broadcast_arrays(*np.atleast_1d(b, A, v, s, t))
    out = np.zeros(b.shape, dtype=float)
    pos = t > 0
    if not np.any(pos):
        return out
    bp, Ap, vp, sp, tp = (x[pos] for x in (b, A, v, s, t))
    with np.errstate(all="ignore"):
        z1, z2, w, ts = _z_terms(bp, Ap, vp, sp, tp)
        f = (vp * _ndtr_diff(z1, w) + sp * (_phi(w) - _phi(z1))) / Ap
        deg = Ap < A_DEGENERATE
        if np.any(deg):
            f_deg = _phi(z1) * bp / (np.square(tp) * sp)
            f = np.where(deg, f_deg, f)
    out[pos] = np.maximum(f, 0.0)
    return out


def finish_cdf_partials(b, A, v, s, t):
    """CDF partial derivatives w.r.t. (b, A, v, s, t) at decision time t > 0.

    Returns (F, dF_db, dF_dA, dF_dv, dF_ds, dF_dt) as broadcast arrays.
    Entries for t <= 0 are zero.
    """
    b, A, v, s, t = np.broadcast_arrays(*np.atleast_1d(b, A, v, s, t))
    shape = b.shape
    F, db, dA, dv, ds, dt = (np.zeros(shape, dtype=float) for _ in range(6))
    pos = t > 0
    if not np.any(pos):
        return F, db, dA, dv, ds, dt
    bp, Ap, vp, sp, tp = (x[pos] for x in (b, A, v, s, t))
    with np.errstate(all="ignore"):
        z1, z2, w, ts = _z_terms(bp, Ap, vp, sp, tp)
        phi1, phiw = _phi(z1), _phi(w)
        dPhi = _ndtr_diff(z1, w)
        surv = np.clip((ts / Ap) * (_gfun(z1) - _gfun(w)), 0.0, 1.0)
        f = np.maximum((vp * dPhi + sp * (phiw - phi1)) / Ap, 0.0)

        d_b = -dPhi / Ap
        d_A = (surv - ndtr(w)) / Ap
        d_v = (tp / Ap) * dPhi
        d_s = (tp / Ap) * (phiw - phi1)

        deg = Ap < A_DEGENERATE
        if np.any(deg):
            surv = np.where(deg, ndtr(z1), surv)
            f = np.where(deg, phi1 * bp / (np.square(tp) * sp), f)
            d_b = np.where(deg, -phi1 / ts, d_b)
            d_A = np.where(deg, phi1 / (2.0 * ts), d_A)
            d_v = np.where(deg, phi1 / sp, d_v)
            d_s = np.where(deg, z1 * phi1 / sp, d_s)
    F[pos] = 1.0 - surv
    db[pos], dA[pos], dv[pos], ds[pos], dt[pos] = d_b, d_A, d_v, d_s, f
    return F, db, dA, dv, ds, dt


def finish_pdf_partials(b, A, v, s, t):
    """Density partial derivatives w.r.t. (b, A, v, s, t) at decision time t > 0.

    Returns (f, df_db, df_dA, df_dv, df_ds, df_dt) as broadcast arrays.
    """
    b, A, v, s, t = np.broadcast_arrays(*np.atleast_1d(b, A, v, s, t))
    shape = b.shape
    f, db, dA, dv, ds, dt = (np.zeros(shape, dtype=float) for _ in range(6))
    pos = t > 0
    if not np.any(pos):
        return f, db, dA, dv, ds, dt
    bp, Ap, vp, sp, tp = (x[pos] for x in (b, A, v, s, t))
    with np.errstate(all="ignore"):
        z1, z2, w, ts = _z_terms(bp, Ap, vp, sp, tp)
        phi1, phiw = _phi(z1), _phi(w)
        dPhi = _ndtr_diff(z1, w)
        fp = (vp * dPhi + sp * (phiw - phi1)) / Ap

        d_b = (vp * (phi1 - phiw) + sp * (z1 * phi1 - w * phiw)) / (Ap * ts)
        d_A = -fp / Ap + (bp - Ap) * phiw / (Ap * np.square(tp) * sp)
        d_v = (dPhi - (vp / sp) * (phi1 - phiw) + w * phiw - z1 * phi1) / Ap
        d_s = ((vp / sp) * (w * phiw - z1 * phi1) + (phiw - phi1)
               + (np.square(w) * phiw - np.square(z1) * phi1)) / Ap
        d_t = (np.square(bp - Ap) * phiw - np.square(bp) * phi1) / (Ap * sp * tp ** 3)

        deg = Ap < A_DEGENERATE
        if np.any(deg):
            t2s = np.square(tp) * sp
            fp = np.where(deg, phi1 * bp / t2s, fp)
            d_b = np.where(deg, phi1 * (1.0 - bp * z1 / ts) / t2s, d_b)
            d_A = np.where(deg, phi1 * (vp * z1 + sp * (np.square(z1) - 1.0)) / (2.0 * t2s * sp), d_A)
            d_v = np.where(deg, bp * z1 * phi1 / (t2s * sp), d_v)
            d_s = np.where(deg, bp * phi1 * (np.square(z1) - 1.0) / (t2s * sp), d_s)
            d_t = np.where(deg, (bp * phi1 / sp) * (z1 * bp / (sp * tp ** 4) - 2.0 / tp ** 3), d_t)
    f[pos] = np.maximum(fp, 0.0)
    db[pos], dA[pos], dv[pos], ds[pos], dt[pos] = d_b, d_A, d_v, d_s, d_t
    return f, db, dA, dv, ds, dt


def race_terms(b, A, v, s, t, choice_onehot, with_grads: bool):
    """Fused per-trial race evaluation.

    One pass over broadcast (n, n_acc) arrays computing the winner's log
    density, the losers' log survival, and (optionally) every parameter
    partial, sharing the normal-distribution evaluations between them.
    Returns (logp (n,), grads dict | None, floored (n,)).
    """
    shape = b.shape
    pos = t > 0
    any_pos = bool(np.any(pos))
    f = np.zeros(shape)
    surv = np.ones(shape)
    surv[~pos] = 1.0
    parts = {name: np.zeros(shape) for name in
             ("fb", "fA", "fv", "fs", "ft", "Fb", "FA", "Fv", "Fs", "Ft")} if with_grads else None
    if any_pos:
        bp, Ap, vp, sp, tp = (x[pos] for x in (b, A, v, s, t))
        with np.errstate(all="ignore"):
            ts = tp * sp
            z1 = (bp - tp * vp) / ts
            z2 = Ap / ts
            w = z1 - z2
            phi1, phiw = _phi(z1), _phi(w)
            cdf1, cdfw = ndtr(z1), ndtr(w)
            d_phi = np.where(z1 + w > 0.0, ndtr(-w) - ndtr(-z1), cdf1 - cdfw)
            g1 = z1 * cdf1 + phi1
            gw = w * cdfw + phiw
            sv = np.clip((ts / Ap) * (g1 - gw), 0.0, 1.0)
            fp = (vp * d_phi + sp * (phiw - phi1)) / Ap

            deg = Ap < A_DEGENERATE
            any_deg = bool(np.any(deg))
            if any_deg:
                sv = np.where(deg, cdf1, sv)
                fp = np.where(deg, phi1 * bp / (np.square(tp) * sp), fp)
            if with_grads:
                d = {}
                d["fb"] = (vp * (phi1 - phiw) + sp * (z1 * phi1 - w * phiw)) / (Ap * ts)
                d["fA"] = -fp / Ap + (bp - Ap) * phiw / (Ap * np.square(tp) * sp)
                d["fv"] = (d_phi - (vp / sp) * (phi1 - phiw) + w * phiw - z1 * phi1) / Ap
                d["fs"] = ((vp / sp) * (w * phiw - z1 * phi1) + (phiw - phi1)
                           + (np.square(w) * phiw - np.square(z1) * phi1)) / Ap
                d["ft"] = (np.square(bp - Ap) * phiw - np.square(bp) * phi1) / (Ap * sp * tp ** 3)
                d["Fb"] = -d_phi / Ap
                d["FA"] = (sv - cdfw) / Ap
                d["Fv"] = (tp / Ap) * d_phi
                d["Fs"] = (tp / Ap) * (phiw - phi1)
                d["Ft"] = fp
                if any_deg:
                    t2s = np.square(tp) * sp
                    d["fb"] = np.where(deg, phi1 * (1.0 - bp * z1 / ts) / t2s, d["fb"])
                    d["fA"] = np.where(deg, phi1 * (vp * z1 + sp * (np.square(z1) - 1.0))
                                       / (2.0 * t2s * sp), d["fA"])
                    d["fv"] = np.where(deg, bp * z1 * phi1 / (t2s * sp), d["fv"])
                    d["fs"] = np.where(deg, bp * phi1 * (np.square(z1) - 1.0) / (t2s * sp), d["fs"])
                    d["ft"] = np.where(deg, (bp * phi1 / sp)
                                       * (z1 * bp / (sp * tp ** 4) - 2.0 / tp ** 3), d["ft"])
                    d["Fb"] = np.where(deg, -phi1 / ts, d["Fb"])
                    d["FA"] = np.where(deg, phi1 / (2.0 * ts), d["FA"])
                    d["Fv"] = np.where(deg, phi1 / sp, d["Fv"])
                    d["Fs"] = np.where(deg, z1 * phi1 / sp, d["Fs"])
                    d["Ft"] = np.where(deg, fp, d["Ft"])
                for name, vals in d.items():
                    parts[name][pos] = vals
        f[pos] = np.maximum(fp, 0.0)
        surv[pos] = sv

    with np.errstate(all="ignore"):
        logf = np.where(f > 0, np.log(np.where(f > 0, f, 1.0)), -np.inf)
        logs = np.where(surv > 0, np.log(np.where(surv > 0, surv, 1.0)), -np.inf)
        logp = np.where(choice_onehot, logf, logs).sum(axis=-1)
        floored = ~np.isfinite(logp) | (logp < LOG_FLOOR)
        logp = np.where(floored, LOG_FLOOR, logp)
        if not with_grads:
            return logp, None, floored

        inv_f = np.where(f > 0, 1.0 / np.where(f > 0, f, 1.0), 0.0)
        inv_s = np.where(surv > 0, 1.0 / np.where(surv > 0, surv, 1.0), 0.0)
        grads = {}
        for name, fkey, skey in (("b", "fb", "Fb"), ("A", "fA", "FA"),
                                 ("v", "fv", "Fv"), ("s", "fs", "Fs")):
            g = np.where(choice_onehot, parts[fkey] * inv_f, -parts[skey] * inv_s)
            grads[name] = np.where(floored[..., None], 0.0, np.where(np.isfinite(g), g, 0.0))
        g_tau = np.where(choice_onehot, -parts["ft"] * inv_f, parts["Ft"] * inv_s)
        grads["tau"] = np.where(floored[..., None], 0.0, np.where(np.isfinite(g_tau), g_tau, 0.0))
    return logp, grads, floored


def race_logp_and_grads(b, A, v, s, t, winner):
    """Dispatcher for the hot path: numba kernel when available, else numpy.

    ``winner`` is the (n,) array of winning accumulator indices.  Returns the
    same (logp, grads, floored) triple as :func:`race_terms`.
    """
    from . import lba_fast
    if lba_fast.HAVE_NUMBA:
        return lba_fast.race_grads_fast(b, A, v, s, t, winner)
    onehot = winner[:, None] == np.arange(b.shape[1])[None, :]
    return race_terms(b, A, v, s, t, onehot, with_grads=True)


def race_logp(b, A, v, s, t, winner):
    """Value-only dispatcher; returns (logp, floored)."""
    from . import lba_fast
    if lba_fast.HAVE_NUMBA:
        return lba_fast.race_logp_fast(b, A, v, s, t, winner)
    onehot = winner[:, None] == np.arange(b.shape[1])[None, :]
    logp, _, floored = race_terms(b, A, v, s, t, onehot, with_grads=False)
    return logp, floored


def _validated_arrays(params: list[AccumulatorParams]):
    if not params:
        raise LbaDomainError("at least one accumulator is required")
    for p in params:
        p.validate()
    b = np.array([p.b for p in params], dtype=float)
    A = np.array([p.A for p in params], dtype=float)
    v = np.array([p.v for p in params], dtype=float)
    s = np.array([p.s for p in params], dtype=float)
    tau = np.array([p.tau for p in params], dtype=float)
    return b, A, v, s, tau


def lba_cdf(p: AccumulatorParams, t):
    """P(accumulator finishes by decision time t); defective with limit Phi(v/s)."""
    p.validate()
    out = finish_cdf(p.b, p.A, p.v, p.s, t)
    return float(out[0]) if np.isscalar(t) else out


def lba_pdf(p: AccumulatorParams, t):
    """Defective finishing-time density at decision time t."""
    p.validate()
    out = finish_pdf(p.b, p.A, p.v, p.s, t)
    return float(out[0]) if np.isscalar(t) else out


def joint_logdensity_terms(b, A, v, s, t, choice_onehot):
    """Vectorized per-trial log joint density of (choice, decision time).

    Parameters are arrays of shape (n, n_acc); ``t`` is decision time with
    shape (n,) or (n, n_acc); ``choice_onehot`` is a boolean (n, n_acc) mask
    of the winning accumulator.  Returns (logp (n,), floored (n,)) where
    floored trials are pinned at LOG_FLOOR.
    """
    t = np.broadcast_to(np.asarray(t, dtype=float)[..., None] if np.ndim(t) == 1 else t, b.shape)
    logp, _, floored = race_terms(b, A, v, s, t, choice_onehot, with_grads=False)
    return logp, floored


def lba_joint_logdensity(params: list[AccumulatorParams], outcome: TrialOutcome) -> float:
    """Log of f_choice(rt - tau) * prod_{k != choice} (1 - F_k(rt - tau)).

    Accumulators are expected to share the trial's non-decision time; each
    accumulator's own tau is applied, which coincides with the shared-tau
    density when they are equal.  Floored at LOG_FLOOR when rt <= tau or the
    density underflows.
    """
    b, A, v, s, tau = _validated_arrays(params)
    if not 0 <= outcome.choice < len(params):
        raise LbaDomainError(f"choice {outcome.choice} out of range for {len(params)} accumulators")
    onehot = np.zeros((1, len(params)), dtype=bool)
    onehot[0, outcome.choice] = True
    logp, _ = joint_logdensity_terms(b[None, :], A[None, :], v[None, :], s[None, :],
                                     (outcome.rt - tau)[None, :], onehot)
    return float(logp[0])


def joint_gradient_terms(b, A, v, s, t, choice_onehot):
    """Vectorized gradient of the per-trial log joint density.

    Same shapes as :func:`joint_logdensity_terms`.  Returns
    (logp (n,), grads dict with (n, n_acc) arrays for b/A/v/s/tau, floored (n,)).
    Gradients of floored trials are zero.  tau gradients are per-accumulator
    contributions under the shared-tau convention.
    """
    t = np.broadcast_to(np.asarray(t, dtype=float)[..., None] if np.ndim(t) == 1 else t, b.shape)
    return race_terms(b, A, v, s, t, choice_onehot, with_grads=True)


def lba_param_grads(params: list[AccumulatorParams], outcome: TrialOutcome) -> LbaGradient:
    """Analytic gradient of :func:`lba_joint_logdensity` per accumulator."""
    b, A, v, s, tau = _validated_arrays(params)
    if not 0 <= outcome.choice < len(params):
        raise LbaDomainError(f"choice {outcome.choice} out of range for {len(params)} accumulators")
    onehot = np.zeros((1, len(params)), dtype=bool)
    onehot[0, outcome.choice] = True
    _, grads, floored = joint_gradient_terms(b[None, :], A[None, :], v[None, :], s[None, :],
                                             (outcome.rt - tau)[None, :], onehot)
    return LbaGradient(
        d_b=grads["b"][0], d_A=grads["A"][0], d_v=grads["v"][0],
        d_s=grads["s"][0], d_tau=grads["tau"][0], floored=bool(floored[0]),
    )


def simulate_trials(b, A, v, s, tau, n: int, rng: np.random.Generator):
    """Simulate n independent trials from one parameter set.

    Parameters are per-accumulator vectors.  Trials where every drift is
    negative are redrawn (each observed trial must have a response), with a
    cap of MAX_TRIAL_REDRAWS redraw rounds.

    Returns (choices (n,), rts (n,)).
    """
    b, A, v, s, tau = (np.asarray(x, dtype=float) for x in (b, A, v, s, tau))
    n_acc = b.shape[0]
    choices = np.empty(n, dtype=np.int64)
    rts = np.empty(n, dtype=float)
    todo = np.arange(n)
    rounds = 0
    while todo.size:
        m = todo.size
        k = rng.uniform(0.0, 1.0, size=(m, n_acc)) * A
        d = rng.normal(loc=v, scale=s, size=(m, n_acc))
        with np.errstate(divide="ignore", invalid="ignore"):
            finish = np.where(d > 0, (b - k) / d, np.inf)
        ok = np.isfinite(finish).any(axis=1)
        if np.any(ok):
            idx = todo[ok]
            win = np.argmin(finish[ok], axis=1)
            choices[idx] = win
            rts[idx] = finish[ok, win] + tau[win]
        todo = todo[~ok]
        rounds += 1
        if todo.size and rounds > MAX_TRIAL_REDRAWS:
            raise RuntimeError(
                f"simulate_trials exceeded {MAX_TRIAL_REDRAWS} redraws; "
                "all-negative drifts are too likely for these parameters")
    return choices, rts


def simulate_trial(params: list[AccumulatorParams], rng) -> TrialOutcome:
    """Simulate one trial; ``rng`` may be a seed or a numpy Generator."""
    b, A, v, s, tau = _validated_arrays(params)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    choices, rts = simulate_trials(b, A, v, s, tau, 1, gen)
    return TrialOutcome(choice=int(choices[0]), rt=float(rts[0]))
