"""Numba kernels for the race-evaluation hot path.

Scalar re-implementations of :func:`lbavb.lba.race_terms`: one fused loop per
(trial, accumulator) cell instead of dozens of vectorized passes.  The numpy
implementation remains the reference; the test suite checks the two agree to
machine precision.  Set LBAVB_NO_NUMBA=1 to force the numpy path.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:  # pragma: no cover - exercised via the dispatcher
    if os.environ.get("LBAVB_NO_NUMBA"):
        raise ImportError("numba disabled by LBAVB_NO_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap(args[0]) if args and callable(args[0]) else wrap


SQRT_2PI = math.sqrt(2.0 * math.pi)
SQRT_2 = math.sqrt(2.0)
LOG_FLOOR = -700.0
A_DEGENERATE = 1e-10


@njit(cache=True)
def _race_grads_kernel(b, A, v, s, t, winner, logp, grads):  # pragma: no cover - jitted
    n, m = b.shape
    for i in range(n):
        total = 0.0
        ok = True
        for k in range(m):
            tt = t[i, k]
            if tt <= 0.0:
                # no finishing mass yet: survival 1 for losers, zero density
                # for the winner; all partials vanish
                if k == winner[i]:
                    ok = False
                for q in range(5):
                    grads[i, k, q] = 0.0
                continue
            bb = b[i, k]
            AA = A[i, k]
            vv = v[i, k]
            ss = s[i, k]
            ts = tt * ss
            z1 = (bb - tt * vv) / ts
            z2 = AA / ts
            w = z1 - z2
            phi1 = math.exp(-0.5 * z1 * z1) / SQRT_2PI
            phiw = math.exp(-0.5 * w * w) / SQRT_2PI
            if z1 + w > 0.0:
                c1c = 0.5 * math.erfc(z1 / SQRT_2)
                cwc = 0.5 * math.erfc(w / SQRT_2)
                cdf1 = 1.0 - c1c
                cdfw = 1.0 - cwc
                d_phi = cwc - c1c
            else:
                cdf1 = 0.5 * math.erfc(-z1 / SQRT_2)
                cdfw = 0.5 * math.erfc(-w / SQRT_2)
                d_phi = cdf1 - cdfw
            if AA < A_DEGENERATE:
                surv = cdf1
                t2s = tt * tt * ss
                f = phi1 * bb / t2s
                fb = phi1 * (1.0 - bb * z1 / ts) / t2s
                fA = phi1 * (vv * z1 + ss * (z1 * z1 - 1.0)) / (2.0 * t2s * ss)
                fv = bb * z1 * phi1 / (t2s * ss)
                fs = bb * phi1 * (z1 * z1 - 1.0) / (t2s * ss)
                ft = (bb * phi1 / ss) * (z1 * bb / (ss * tt ** 4) - 2.0 / tt ** 3)
                Fb = -phi1 / ts
                FA = phi1 / (2.0 * ts)
                Fv = phi1 / ss
                Fs = z1 * phi1 / ss
                Ft = f
            else:
                g1 = z1 * cdf1 + phi1
                gw = w * cdfw + phiw
                surv = (ts / AA) * (g1 - gw)
                if surv < 0.0:
                    surv = 0.0
                elif surv > 1.0:
                    surv = 1.0
                f = (vv * d_phi + ss * (phiw - phi1)) / AA
                if f < 0.0:
                    f = 0.0
                fb = (vv * (phi1 - phiw) + ss * (z1 * phi1 - w * phiw)) / (AA * ts)
                fA = -f / AA + (bb - AA) * phiw / (AA * tt * tt * ss)
                fv = (d_phi - (vv / ss) * (phi1 - phiw) + w * phiw - z1 * phi1) / AA
                fs = ((vv / ss) * (w * phiw - z1 * phi1) + (phiw - phi1)
                      + (w * w * phiw - z1 * z1 * phi1)) / AA
                ft = ((bb - AA) * (bb - AA) * phiw - bb * bb * phi1) / (AA * ss * tt ** 3)
                Fb = -d_phi / AA
                FA = (surv - cdfw) / AA
                Fv = (tt / AA) * d_phi
                Fs = (tt / AA) * (phiw - phi1)
                Ft = f
            if k == winner[i]:
                if f > 0.0:
                    total += math.log(f)
                    inv = 1.0 / f
                    grads[i, k, 0] = fb * inv
                    grads[i, k, 1] = fA * inv
                    grads[i, k, 2] = fv * inv
                    grads[i, k, 3] = fs * inv
                    grads[i, k, 4] = -ft * inv
                else:
                    ok = False
            else:
                if surv > 0.0:
                    total += math.log(surv)
                    inv = 1.0 / surv
                    grads[i, k, 0] = -Fb * inv
                    grads[i, k, 1] = -FA * inv
                    grads[i, k, 2] = -Fv * inv
                    grads[i, k, 3] = -Fs * inv
                    grads[i, k, 4] = Ft * inv
                else:
                    ok = False
        if (not ok) or (not math.isfinite(total)) or total < LOG_FLOOR:
            logp[i] = LOG_FLOOR
            for k in range(m):
                for q in range(5):
                    grads[i, k, q] = 0.0
        else:
            logp[i] = total
            for k in range(m):
                for q in range(5):
                    if not math.isfinite(grads[i, k, q]):
                        grads[i, k, q] = 0.0


@njit(cache=True)
def _race_logp_kernel(b, A, v, s, t, winner, logp):  # pragma: no cover - jitted
    n, m = b.shape
    for i in range(n):
        total = 0.0
        ok = True
        for k in range(m):
            tt = t[i, k]
            if tt <= 0.0:
                if k == winner[i]:
                    ok = False
                continue
            bb = b[i, k]
            AA = A[i, k]
            vv = v[i, k]
            ss = s[i, k]
            ts = tt * ss
            z1 = (bb - tt * vv) / ts
            w = z1 - AA / ts
            phi1 = math.exp(-0.5 * z1 * z1) / SQRT_2PI
            phiw = math.exp(-0.5 * w * w) / SQRT_2PI
            if z1 + w > 0.0:
                c1c = 0.5 * math.erfc(z1 / SQRT_2)
                cwc = 0.5 * math.erfc(w / SQRT_2)
                cdf1 = 1.0 - c1c
                cdfw = 1.0 - cwc
                d_phi = cwc - c1c
            else:
                cdf1 = 0.5 * math.erfc(-z1 / SQRT_2)
                cdfw = 0.5 * math.erfc(-w / SQRT_2)
                d_phi = cdf1 - cdfw
            if k == winner[i]:
                if AA < A_DEGENERATE:
                    f = phi1 * bb / (tt * tt * ss)
                else:
                    f = (vv * d_phi + ss * (phiw - phi1)) / AA
                if f > 0.0:
                    total += math.log(f)
                else:
                    ok = False
            else:
                if AA < A_DEGENERATE:
                    surv = cdf1
                else:
                    surv = (ts / AA) * ((z1 * cdf1 + phi1) - (w * cdfw + phiw))
                    if surv < 0.0:
                        surv = 0.0
                    elif surv > 1.0:
                        surv = 1.0
                if surv > 0.0:
                    total += math.log(surv)
                else:
                    ok = False
        if (not ok) or (not math.isfinite(total)) or total < LOG_FLOOR:
            logp[i] = LOG_FLOOR
        else:
            logp[i] = total


def race_grads_fast(b, A, v, s, t, winner):
    """Fused log density + parameter gradients; returns (logp, grads dict, floored)."""
    n, m = b.shape
    logp = np.empty(n)
    grads = np.zeros((n, m, 5))
    _race_grads_kernel(np.ascontiguousarray(b), np.ascontiguousarray(A),
                       np.ascontiguousarray(v), np.ascontiguousarray(s),
                       np.ascontiguousarray(t), winner, logp, grads)
    out = {name: grads[:, :, q] for q, name in enumerate(("b", "A", "v", "s", "tau"))}
    return logp, out, logp <= LOG_FLOOR


def race_logp_fast(b, A, v, s, t, winner):
    """Fused log density only; returns (logp, floored)."""
    n, m = b.shape
    logp = np.empty(n)
    _race_logp_kernel(np.ascontiguousarray(b), np.ascontiguousarray(A),
                      np.ascontiguousarray(v), np.ascontiguousarray(s),
                      np.ascontiguousarray(t), winner, logp)
    return logp, logp <= LOG_FLOOR
