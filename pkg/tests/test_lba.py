"""Trial-level distribution, gradient and simulator checks against independent oracles."""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ndtr

from lbavb import lba
from lbavb.lba import AccumulatorParams, TrialOutcome


def two_acc(b=1.0, A=0.5, v=(2.0, 1.0), s=1.0, tau=0.2):
    return [AccumulatorParams(b, A, v[0], s, tau), AccumulatorParams(b, A, v[1], s, tau)]


def joint_logdensity_fn(flat, choice, rt):
    """Joint log density as a function of the flat per-accumulator parameter vector."""
    n_acc = len(flat) // 5
    params = [AccumulatorParams(*flat[5 * k:5 * k + 5]) for k in range(n_acc)]
    return lba.lba_joint_logdensity(params, TrialOutcome(choice, rt))


class TestCdf:
    def test_zero_before_accumulation_starts(self):
        p = AccumulatorParams(1.0, 0.5, 1.5, 1.0, 0.0)
        assert lba.lba_cdf(p, 0.0) == 0.0
        assert lba.lba_cdf(p, -1.0) == 0.0

    def test_matches_monte_carlo_oracle(self):
        # simulate 1e7 finishing times k~U[0,A], d~N(v,s), (b-k)/d for d>0
        rng = np.random.default_rng(7)
        n = 10_000_000
        k = rng.uniform(0.0, 0.5, n)
        d = rng.normal(1.5, 1.0, n)
        finish = np.where(d > 0, (1.0 - k) / np.where(d > 0, d, 1.0), np.inf)
        emp = float((finish <= 0.6).mean())
        se = np.sqrt(emp * (1 - emp) / n)
        p = AccumulatorParams(1.0, 0.5, 1.5, 1.0, 0.0)
        assert abs(lba.lba_cdf(p, 0.6) - emp) < 3 * se

    def test_defective_limit_is_normal_cdf_of_drift_ratio(self):
        p = AccumulatorParams(1.0, 0.5, 1.5, 1.0, 0.0)
        assert lba.lba_cdf(p, 1e6) == pytest.approx(float(ndtr(1.5)), abs=1e-4)

    def test_nondecreasing_and_bounded(self):
        p = AccumulatorParams(1.2, 0.4, 0.8, 1.0, 0.0)
        t = np.linspace(1e-3, 50, 500)
        F = lba.finish_cdf(p.b, p.A, p.v, p.s, t)
        assert np.all(np.diff(F) >= -1e-12)
        assert np.all(F >= 0) and np.all(F <= ndtr(p.v / p.s) + 1e-12)

    def test_invalid_params_rejected(self):
        with pytest.raises(lba.LbaDomainError):
            lba.lba_cdf(AccumulatorParams(1.0, 0.5, 1.0, -1.0, 0.0), 1.0)
        with pytest.raises(lba.LbaDomainError):
            lba.lba_cdf(AccumulatorParams(0.3, 0.5, 1.0, 1.0, 0.0), 1.0)
        with pytest.raises(lba.LbaDomainError):
            lba.lba_cdf(AccumulatorParams(np.nan, 0.5, 1.0, 1.0, 0.0), 1.0)


class TestPdf:
    def test_zero_before_support(self):
        p = AccumulatorParams(1.0, 0.5, 1.5, 1.0, 0.0)
        assert lba.lba_pdf(p, 0.0) == 0.0
        assert lba.lba_pdf(p, -0.5) == 0.0

    def test_matches_finite_difference_of_cdf(self):
        p = AccumulatorParams(1.0, 0.5, 1.5, 1.0, 0.0)
        h = 1e-5
        fd = (lba.lba_cdf(p, 0.6 + h) - lba.lba_cdf(p, 0.6 - h)) / (2 * h)
        assert lba.lba_pdf(p, 0.6) == pytest.approx(fd, rel=1e-4)

    def test_fd_consistency_across_parameter_grid(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            b = rng.uniform(0.5, 3)
            p = AccumulatorParams(b, rng.uniform(0.1, b), rng.uniform(-1, 4), 1.0, 0.0)
            t = rng.uniform(0.1, 3)
            h = 1e-5
            fd = (lba.lba_cdf(p, t + h) - lba.lba_cdf(p, t - h)) / (2 * h)
            if abs(fd) < 1e-12:
                continue
            assert lba.lba_pdf(p, t) == pytest.approx(fd, rel=1e-4)

    def test_integrates_to_defective_mass(self):
        # The finishing time has a 1/t tail (slow drifts), so the horizon must
        # be long before the integral approaches the defective mass.
        p = AccumulatorParams(1.0, 0.5, 2.0, 1.0, 0.0)
        mass = (quad(lambda t: lba.lba_pdf(p, t), 0, 5, limit=200)[0]
                + quad(lambda t: lba.lba_pdf(p, t), 5, 3000, limit=200)[0])
        assert mass == pytest.approx(float(ndtr(2.0)), abs=1e-4)


class TestJointLogDensity:
    def test_floor_when_rt_below_nondecision_time(self):
        params = two_acc(tau=0.3)
        assert lba.lba_joint_logdensity(params, TrialOutcome(0, 0.25)) == lba.LOG_FLOOR

    def test_matches_composition_of_pdf_and_survival(self):
        params = two_acc()
        got = lba.lba_joint_logdensity(params, TrialOutcome(0, 0.7))
        t = 0.7 - 0.2
        want = np.log(lba.lba_pdf(params[0], t)) + np.log(1.0 - lba.lba_cdf(params[1], t))
        assert got == pytest.approx(want, abs=1e-12)

    def test_total_mass_is_probability_any_drift_positive(self):
        params = two_acc(v=(2.0, 1.0), tau=0.0)
        total = 0.0
        for c in (0, 1):
            fn = lambda t, c=c: np.exp(lba.lba_joint_logdensity(params, TrialOutcome(c, t)))
            total += quad(fn, 1e-6, 5, limit=300)[0] + quad(fn, 5, 3000, limit=300)[0]
        want = 1.0 - float(ndtr(-2.0) * ndtr(-1.0))
        assert total == pytest.approx(want, abs=1e-3)

    def test_label_swap_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            b = rng.uniform(0.5, 3)
            ps = [AccumulatorParams(b, rng.uniform(0.1, b), rng.uniform(-1, 4), 1.0, 0.1),
                  AccumulatorParams(b, rng.uniform(0.1, b), rng.uniform(-1, 4), 1.0, 0.1)]
            rt = 0.1 + rng.uniform(0.05, 2.5)
            a = lba.lba_joint_logdensity(ps, TrialOutcome(0, rt))
            b_ = lba.lba_joint_logdensity(ps[::-1], TrialOutcome(1, rt))
            assert a == b_

    def test_empty_accumulator_list_rejected(self):
        with pytest.raises(lba.LbaDomainError):
            lba.lba_joint_logdensity([], TrialOutcome(0, 1.0))

    def test_choice_out_of_range_rejected(self):
        with pytest.raises(lba.LbaDomainError):
            lba.lba_joint_logdensity(two_acc(), TrialOutcome(2, 1.0))


class TestGradients:
    @staticmethod
    def fd_gradient(params, outcome, step=1e-6):
        flat = np.array([(p.b, p.A, p.v, p.s, p.tau) for p in params]).ravel()
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += step
            dn[i] -= step
            grad[i] = (joint_logdensity_fn(up, outcome.choice, outcome.rt)
                       - joint_logdensity_fn(dn, outcome.choice, outcome.rt)) / (2 * step)
        return grad.reshape(len(params), 5)

    @staticmethod
    def analytic_matrix(g):
        return np.stack([g.d_b, g.d_A, g.d_v, g.d_s, g.d_tau], axis=1)

    def test_single_point_matches_fd(self):
        params = two_acc()
        outcome = TrialOutcome(0, 0.7)
        ana = self.analytic_matrix(lba.lba_param_grads(params, outcome))
        num = self.fd_gradient(params, outcome)
        assert np.allclose(ana, num, rtol=1e-5, atol=1e-8)

    def test_random_sweep_matches_fd(self):
        # 100 sane-regime points over the documented parameter ranges; trials
        # whose log density sits at astronomically small values are resampled
        # because double-precision finite differences are meaningless there.
        rng = np.random.default_rng(42)
        n_points = 0
        while n_points < 100:
            b = rng.uniform(0.5, 3)
            A = rng.uniform(0.1, b)
            v = rng.uniform(-1, 4, size=2)
            tau = rng.uniform(0.05, 0.5)
            rt = tau + rng.uniform(0.01, 3)
            params = [AccumulatorParams(b, A, v[0], 1.0, tau),
                      AccumulatorParams(b, A, v[1], 1.0, tau)]
            outcome = TrialOutcome(int(rng.integers(0, 2)), rt)
            if lba.lba_joint_logdensity(params, outcome) < -100:
                continue
            n_points += 1
            ana = self.analytic_matrix(lba.lba_param_grads(params, outcome))
            num = self.fd_gradient(params, outcome)
            err = np.abs(ana - num)
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-12)
            assert np.all((err <= 1e-5 * denom) | (err <= 1e-8))

    def test_cdf_v_gradient_zero_at_zero_decision_time(self):
        _, _, _, dv, _, _ = lba.finish_cdf_partials(1.0, 0.5, 2.0, 1.0, 0.0)
        assert dv[0] == 0.0

    def test_floored_trial_has_zero_gradient_and_flag(self):
        g = lba.lba_param_grads(two_acc(tau=0.3), TrialOutcome(0, 0.2))
        assert g.floored
        for arr in (g.d_b, g.d_A, g.d_v, g.d_s, g.d_tau):
            assert np.all(arr == 0.0)

    # 60-digit arithmetic on the exact finite-A formulas, evaluated at A = 1e-9
    # with central differences (step 1e-12, 1e-10 for the A direction), for
    # b=1, v=2, s=1.  Columns: value, d/db, d/dA, d/dv, d/ds, d/dt.
    DEGENERATE_ORACLE = {
        ("pdf", 0.4): (2.20040829255, -0.550102065162, 0.275051031263,
                       1.10020414353, -1.65030622216, -4.12576556916),
        ("cdf", 0.4): (0.308537539166, -0.880163317461, 0.440081658822,
                       0.352065326984, 0.176032663052, 2.20040829255),
        ("pdf", 1.1): (0.181845070373, 0.36218728909, -0.181093644513,
                       -0.198376440489, 0.0345655920694, -0.494574872074),
        ("cdf", 1.1): (0.862343556839, -0.20002957751, 0.100014788738,
                       0.220032535261, -0.240035493112, 0.181845070373),
    }

    def test_degenerate_A_branch_matches_high_precision_oracle(self):
        for (kind, t), want in self.DEGENERATE_ORACLE.items():
            fn = lba.finish_pdf_partials if kind == "pdf" else lba.finish_cdf_partials
            got = [float(x[0]) for x in fn(1.0, 1e-12, 2.0, 1.0, t)]
            assert got == pytest.approx(list(want), rel=1e-7)


class TestSimulation:
    def test_degenerate_parameters_give_deterministic_rt(self):
        p = [AccumulatorParams(1.0, 0.0, 2.0, 1e-9, 0.2)]
        out = lba.simulate_trial(p, 123)
        assert out.choice == 0
        assert out.rt == pytest.approx(0.7, abs=1e-6)

    def test_fixed_seed_reproducible(self):
        params = two_acc()
        a = [lba.simulate_trial(params, 5) for _ in range(4)]
        b = [lba.simulate_trial(params, 5) for _ in range(4)]
        assert a == b

    def test_rt_distribution_matches_analytic_conditional_cdf(self):
        params = two_acc(tau=0.2)
        rng = np.random.default_rng(99)
        b, A, v, s, tau = (np.array([p.b for p in params]), np.array([p.A for p in params]),
                           np.array([p.v for p in params]), np.array([p.s for p in params]),
                           np.array([p.tau for p in params]))
        choices, rts = lba.simulate_trials(b, A, v, s, tau, 100_000, rng)
        rt0 = np.sort(rts[choices == 0])

        # log-spaced grid: resolves the density peak near tau while still
        # covering the heavy 1/t tail out to the largest simulated RT
        tau0 = 0.2
        grid = tau0 + np.logspace(-4, np.log10(max(rt0.max(), 6.0) - tau0 + 1.0), 8000)
        dens = np.array([np.exp(lba.lba_joint_logdensity(params, TrialOutcome(0, t))) for t in grid])
        cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) * 0.5 * np.diff(grid))])
        mass = cdf[-1]

        emp = np.searchsorted(rt0, grid, side="right") / rt0.size
        ks = np.max(np.abs(emp - cdf / mass))
        assert ks < 0.01

        # choice proportion against the quadrature oracle
        dens1 = np.array([np.exp(lba.lba_joint_logdensity(params, TrialOutcome(1, t))) for t in grid])
        mass1 = np.sum((dens1[1:] + dens1[:-1]) * 0.5 * np.diff(grid))
        p0 = mass / (mass + mass1)
        phat = (choices == 0).mean()
        se = np.sqrt(p0 * (1 - p0) / choices.size)
        assert abs(phat - p0) < 3 * se

    def test_rejection_redraw_conditions_on_response(self):
        # both drifts almost surely negative: every returned trial still has a response
        params = [AccumulatorParams(1.0, 0.2, -2.0, 1.0, 0.1),
                  AccumulatorParams(1.0, 0.2, -2.5, 1.0, 0.1)]
        rng = np.random.default_rng(1)
        b, A, v, s, tau = (np.array([p.b for p in params]), np.array([p.A for p in params]),
                           np.array([p.v for p in params]), np.array([p.s for p in params]),
                           np.array([p.tau for p in params]))
        choices, rts = lba.simulate_trials(b, A, v, s, tau, 500, rng)
        assert np.all(np.isfinite(rts)) and np.all(rts > 0.1)
        assert set(np.unique(choices)) <= {0, 1}
