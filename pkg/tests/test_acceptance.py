"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria with a reduced CI variant (the replication studies) also have a
full-scale variant gated behind LBAVB_RUN_FULL_ACCEPTANCE=1.
"""

import functools
import json
import os
import time

import numpy as np
import pytest
from scipy.special import ndtr

from lbavb import cli, crossval, hierarchical as hier, lba, modelspec as ms, simstudy, vb

from toys import ConjugateGaussianTarget, GaussianLikelihood, simulate_gaussian_hierarchy

RUN_FULL = bool(os.environ.get("LBAVB_RUN_FULL_ACCEPTANCE"))


def criterion(number, name):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.time()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[criterion {number}] {name}: FAIL ({time.time() - start:.0f}s)")
                raise
            print(f"\n[criterion {number}] {name}: PASS ({time.time() - start:.0f}s)")
        return run
    return wrap


def fd_check(fun, x0, grad, rtol, atol=1e-7, step=1e-6):
    for i in range(x0.size):
        up, dn = x0.copy(), x0.copy()
        up[i] += step
        dn[i] -= step
        fd = (fun(up) - fun(dn)) / (2 * step)
        err = abs(grad[i] - fd)
        assert err <= rtol * max(abs(fd), abs(grad[i])) or err <= atol, \
            f"coordinate {i}: analytic {grad[i]}, fd {fd}"


@criterion(1, "gradient suite")
def test_criterion_1_gradients():
    rng = np.random.default_rng(101)

    # trial-level gradients over >= 50 sane-regime points
    n_points = 0
    while n_points < 50:
        b = rng.uniform(0.5, 3)
        A = rng.uniform(0.1, b)
        v = rng.uniform(-1, 4, size=2)
        tau = rng.uniform(0.05, 0.5)
        rt = tau + rng.uniform(0.01, 3)
        params = [lba.AccumulatorParams(b, A, v[0], 1.0, tau),
                  lba.AccumulatorParams(b, A, v[1], 1.0, tau)]
        outcome = lba.TrialOutcome(int(rng.integers(0, 2)), rt)
        if lba.lba_joint_logdensity(params, outcome) < -100:
            continue
        n_points += 1
        g = lba.lba_param_grads(params, outcome)
        ana = np.stack([g.d_b, g.d_A, g.d_v, g.d_s, g.d_tau], axis=1).ravel()
        flat0 = np.array([(p.b, p.A, p.v, p.s, p.tau) for p in params]).ravel()

        def joint(flat):
            ps = [lba.AccumulatorParams(*flat[5 * k:5 * k + 5]) for k in range(2)]
            return lba.lba_joint_logdensity(ps, outcome)

        fd_check(joint, flat0, ana, rtol=1e-5, atol=1e-8)

    # transformed prior and split-form gradients for both problem sizes
    for d_alpha, n_subjects in ((3, 2), (7, 4)):
        layout = hier.GvbLayout(n_subjects=n_subjects, d_alpha=d_alpha)
        hyb = hier.HybridLayout(n_subjects=n_subjects, d_alpha=d_alpha)
        for _ in range(25):
            chol = np.tril(rng.normal(scale=0.3, size=(d_alpha, d_alpha)))
            chol[np.diag_indices(d_alpha)] = np.exp(rng.normal(scale=0.3, size=d_alpha))
            theta = layout.join(rng.normal(scale=0.6, size=(n_subjects, d_alpha)),
                                rng.normal(size=d_alpha), hier.chol_to_vech(chol),
                                rng.normal(scale=0.5, size=d_alpha))
            fd_check(lambda t: hier.log_prior_tilde(t, layout), theta,
                     hier.grad_log_prior_tilde(theta, layout), rtol=1e-5)

            theta1 = hyb.join(rng.normal(scale=0.6, size=(n_subjects, d_alpha)),
                              rng.normal(size=d_alpha), rng.normal(scale=0.5, size=d_alpha))
            m = rng.normal(size=(d_alpha, d_alpha))
            sigma = m @ m.T + 0.5 * np.eye(d_alpha)
            fd_check(lambda t: hier.log_joint_split(t, sigma, hyb), theta1,
                     hier.grad_theta1_log_joint_split(theta1, sigma, hyb), rtol=1e-5)
            fd_check(lambda t: hier.log_conditional_sigma(t, sigma, hyb), theta1,
                     hier.grad_theta1_log_conditional_sigma(theta1, sigma, hyb), rtol=1e-5)


@criterion(2, "density suite")
def test_criterion_2_densities():
    rng = np.random.default_rng(102)
    # pdf is the t-derivative of the cdf
    for _ in range(40):
        b = rng.uniform(0.5, 3)
        p = lba.AccumulatorParams(b, rng.uniform(0.1, b), rng.uniform(-1, 4), 1.0, 0.0)
        t = rng.uniform(0.1, 3)
        h = 1e-5
        fd = (lba.lba_cdf(p, t + h) - lba.lba_cdf(p, t - h)) / (2 * h)
        if abs(fd) < 1e-10:
            continue
        assert abs(lba.lba_pdf(p, t) - fd) <= 1e-4 * max(abs(fd), 1e-10)

    # defective-mass identity by quadrature
    from scipy.integrate import quad
    params = [lba.AccumulatorParams(1.0, 0.5, 2.0, 1.0, 0.0),
              lba.AccumulatorParams(1.0, 0.5, 1.0, 1.0, 0.0)]
    total = 0.0
    for c in (0, 1):
        fn = lambda t, c=c: np.exp(lba.lba_joint_logdensity(params, lba.TrialOutcome(c, t)))
        total += quad(fn, 1e-6, 5, limit=300)[0] + quad(fn, 5, 3000, limit=300)[0]
    want = 1.0 - float(ndtr(-2.0) * ndtr(-1.0))
    assert abs(total - want) < 1e-3

    # simulator matches the analytic conditional RT distribution
    params = [lba.AccumulatorParams(1.0, 0.5, 2.0, 1.0, 0.2),
              lba.AccumulatorParams(1.0, 0.5, 1.0, 1.0, 0.2)]
    arrays = [np.array([getattr(p, f) for p in params]) for f in ("b", "A", "v", "s", "tau")]
    choices, rts = lba.simulate_trials(*arrays, 100_000, rng)
    rt0 = np.sort(rts[choices == 0])
    grid = 0.2 + np.logspace(-4, np.log10(max(rt0.max(), 6.0) - 0.2 + 1.0), 8000)
    dens = np.array([np.exp(lba.lba_joint_logdensity(params, lba.TrialOutcome(0, t)))
                     for t in grid])
    cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) * 0.5 * np.diff(grid))])
    emp = np.searchsorted(rt0, grid, side="right") / rt0.size
    ks = np.max(np.abs(emp - cdf / cdf[-1]))
    assert ks < 0.01, f"KS distance {ks}"


@criterion(3, "inverse-Wishart conditional suite")
def test_criterion_3_conditional():
    rng = np.random.default_rng(103)
    layout = hier.HybridLayout(n_subjects=4, d_alpha=3)
    for _ in range(10):
        theta1 = rng.normal(size=layout.dim)
        diffs = []
        for _ in range(20):
            m = rng.normal(size=(3, 3))
            sigma = m @ m.T + 0.3 * np.eye(3)
            diffs.append(hier.log_joint_split(theta1, sigma, layout)
                         - hier.log_conditional_sigma(theta1, sigma, layout))
        assert np.var(diffs) < 1e-8, f"variance {np.var(diffs)}"

    m = rng.normal(size=(3, 3))
    psi = m @ m.T + 0.5 * np.eye(3)
    iw = hier.IwParams(nu=12.0, psi=psi)
    draws = np.array([hier.sample_invwishart(iw, rng) for _ in range(30_000)])
    want = psi / (12.0 - 3 - 1)
    se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - want) < 3 * se)


@criterion(4, "linear-algebra suite")
def test_criterion_4_woodbury():
    rng = np.random.default_rng(104)
    for p, r in ((6, 2), (40, 5), (150, 12), (300, 25)):
        b = rng.normal(scale=0.5, size=(p, r))
        d = rng.uniform(0.2, 1.5, size=p)
        ops = vb.FactorCovOps(b, d)
        dense = b @ b.T + np.diag(d ** 2)
        x = rng.normal(size=p)
        want = np.linalg.solve(dense, x)
        assert np.max(np.abs(ops.apply_inverse(x) - want)) < 1e-10
        assert abs(ops.logdet() - np.linalg.slogdet(dense)[1]) < 1e-10


@criterion(5, "estimator suite")
def test_criterion_5_estimators():
    rng = np.random.default_rng(105)
    # conjugate toy: exact posterior recovers the exact log marginal
    y = 0.8 + 0.5 * rng.normal(size=(20, 3))
    toy = ConjugateGaussianTarget(y, v0=2.0, s2=0.25)
    mean, var = toy.posterior()
    lam = vb.VariationalParams(mu=mean, b=np.zeros((3, 2)), d=np.full(3, np.sqrt(var)))
    lbs = [vb.estimate_lb_and_grad(toy, lam, 10, rng)[0] for _ in range(50)]
    se = np.std(lbs, ddof=1) / np.sqrt(len(lbs)) + 1e-9
    assert abs(np.mean(lbs) - toy.log_marginal()) < 3 * se
    _, grad, _ = vb.estimate_lb_and_grad(toy, lam, 50, rng)
    assert np.max(np.abs(grad.pack())) < 1e-8

    # control variate: zero mean, not variance-increasing (1e4 replicates)
    y_h, alpha, mu, sigma, _ = simulate_gaussian_hierarchy(
        np.random.default_rng(7), J=3, D=2, n_per=6)
    target = hier.HybridTarget(GaussianLikelihood(y_h, s2=0.5),
                               hier.HybridLayout(n_subjects=3, d_alpha=2))
    lam_h = vb.VariationalParams(
        mu=np.concatenate([alpha.ravel(), mu, np.zeros(2)]) + 0.3,
        b=0.1 * np.ones((target.dim, 2)), d=np.full(target.dim, 0.3))
    n_rep = 10_000
    rng_a, rng_b = np.random.default_rng(16), np.random.default_rng(16)
    with_cv = np.array([vb.estimate_lb_and_grad_hybrid(target, lam_h, 1, rng_a)[1].pack()
                        for _ in range(n_rep)])
    without = np.array([vb.estimate_lb_and_grad_hybrid(target, lam_h, 1, rng_b,
                                                       control_variate=False)[1].pack()
                        for _ in range(n_rep)])
    diff = with_cv - without   # identical streams: exactly the control-variate term
    se = diff.std(axis=0, ddof=1) / np.sqrt(n_rep) + 1e-12
    assert np.all(np.abs(diff.mean(axis=0)) < 4 * se)
    var_with = with_cv.var(axis=0, ddof=1).sum()
    var_without = without.var(axis=0, ddof=1).sum()
    print(f"  control-variate variance ratio: {var_with / var_without:.4f}")
    assert var_with <= var_without * 1.02


@criterion(6, "hybrid-vs-plain lower-bound pattern")
def test_criterion_6_hybrid_vs_gvb():
    schema = ms.forstmann_schema()
    spec, mu, sigma = simstudy.forstmann_truth(schema)
    plan = [(c, n // 5) for c, n in simstudy.forstmann_plan(schema)]   # 200 / subject
    dataset = simstudy.generate_dataset(simstudy.GeneratingConfig(
        spec=spec, mu_alpha=mu, sigma_alpha=sigma, n_subjects=8, plan=plan, seed=106))

    def final_ma_and_se(result):
        window = result.trace.window
        tail = np.array(result.trace.values[-window:])
        return result.final_moving_average, tail.std(ddof=1) / np.sqrt(window)

    wins = 0
    recovered = None
    for seed in range(5):
        res_h = vb.run_vb(dataset, spec, vb.VbConfig(
            method="hybrid", n_factors=10, n_mc=10, max_iters=4000, seed=seed))
        res_g = vb.run_vb(dataset, spec, vb.VbConfig(
            method="gvb", n_factors=10, n_mc=10, max_iters=4000, seed=seed))
        ma_h, se_h = final_ma_and_se(res_h)
        ma_g, se_g = final_ma_and_se(res_g)
        combined = np.hypot(se_h, se_g)
        print(f"  seed {seed}: hybrid {ma_h:.2f} (se {se_h:.2f})  "
              f"plain {ma_g:.2f} (se {se_g:.2f})")
        if ma_h >= ma_g - 2 * combined:
            wins += 1
        if recovered is None:
            J, D = 8, 7
            mu_hat = res_h.lam.mu[J * D:J * D + D]
            recovered = np.abs(mu_hat - mu)
    assert wins >= 4, f"hybrid matched or beat plain in only {wins}/5 seeds"
    # group-mean recovery on the first fit: within 0.15 in >= 6 of 7 coordinates
    assert int(np.sum(recovered < 0.15)) >= 6, f"recovery errors {recovered}"


def _forstmann_subfamily_3x3(schema):
    family = ms.enumerate_family("forstmann27", schema)
    members = tuple(m for m in family if m.label.endswith("-1"))
    return ms.ModelFamily(kind="forstmann9", members=members)


@criterion(7, "cross-validated screening sensitivity (smoke scale)")
def test_criterion_7_sensitivity_smoke():
    schema = ms.forstmann_schema()
    spec, mu, sigma = simstudy.forstmann_truth(schema)
    family = _forstmann_subfamily_3x3(schema)
    assert len(family) == 9
    generating_index = next(m.index for m in family if m.label == "3-1-1")
    plan = [(c, int(n * 0.3)) for c, n in simstudy.forstmann_plan(schema)]  # 300 / subject
    cfg = simstudy.GeneratingConfig(spec=spec, mu_alpha=mu, sigma_alpha=sigma,
                                    n_subjects=6, plan=plan, seed=107)
    config = vb.VbConfig(method="hybrid", n_factors=15, n_mc=10, max_iters=900,
                         window=120, patience=120)
    curve = simstudy.sensitivity_study(
        family, generating_index, cfg, config, n_replications=5, n_folds=5,
        n_draws=100, seed=107, n_jobs=os.cpu_count(), warm_max_iters=450,
        progress=lambda i, n, r: print(f"  replication {i}/{n}: generating rank {r}"))
    assert curve.n_replications == 5 and curve.n_failed == 0
    f = curve.counts()
    assert np.all(np.diff(f) >= 0) and f[-1] == 5
    top3 = int(f[2])
    print(f"  generating model in top 3: {top3}/5 (ranks {curve.ranks})")
    assert top3 >= 3


@pytest.mark.skipif(not RUN_FULL, reason="full-scale replication; set LBAVB_RUN_FULL_ACCEPTANCE=1")
@criterion(7, "cross-validated screening sensitivity (full scale)")
def test_criterion_7_sensitivity_full():
    schema = ms.forstmann_schema()
    spec, mu, sigma = simstudy.forstmann_truth(schema)
    family = ms.enumerate_family("forstmann27", schema)
    cfg = simstudy.GeneratingConfig(spec=spec, mu_alpha=mu, sigma_alpha=sigma,
                                    n_subjects=19, plan=simstudy.forstmann_plan(schema),
                                    seed=1007)
    config = vb.VbConfig(method="hybrid", n_factors=15, n_mc=10, max_iters=6000)
    curve = simstudy.sensitivity_study(
        family, 19, cfg, config, n_replications=20, n_folds=5, n_draws=100,
        seed=1007, n_jobs=os.cpu_count(), warm_max_iters=2000,
        progress=lambda i, n, r: print(f"  replication {i}/{n}: generating rank {r}"))
    f = curve.counts()
    frac = f[2] / curve.n_replications
    print(f"  generating model in top 3: {f[2]}/{curve.n_replications}")
    assert frac >= 0.70


@criterion(8, "deterministic unit oracles")
def test_criterion_8_deterministic_oracles():
    # ADADELTA first step by hand
    state = vb.AdadeltaState.fresh(1, decay=0.95, eps=1e-7)
    _, lam = vb.adadelta_update(state, np.zeros(1), np.ones(1))
    assert lam[0] == pytest.approx(np.sqrt(1e-7) / np.sqrt(0.05 + 1e-7), rel=1e-12)

    # stopping index for a sequence constant after t0
    t0, m, k = 7, 4, 6
    values = list(np.arange(1, t0 + 1, dtype=float)) + [float(t0)] * 100
    assert vb.stopping_check(values, window=m, patience=k) == t0 + m + k - 1
    assert vb.stopping_check(np.linspace(0, 1, 200), window=20, patience=20) is None

    # Spearman hand cases
    a = {1: 1, 2: 2, 3: 3, 4: 4}
    assert crossval.spearman_rank_corr(a, a) == 1.0
    assert crossval.spearman_rank_corr(a, {1: 4, 2: 3, 3: 2, 4: 1}) == -1.0
    assert crossval.spearman_rank_corr(a, {1: 2, 2: 1, 3: 4, 4: 3}) == pytest.approx(0.6)

    # fold partition properties
    schema = ms.forstmann_schema()
    spec, mu, sigma = simstudy.forstmann_truth(schema)
    ds = simstudy.generate_dataset(simstudy.GeneratingConfig(
        spec=spec, mu_alpha=mu, sigma_alpha=sigma, n_subjects=2,
        plan=[(c, 7) for c, _ in simstudy.forstmann_plan(schema)], seed=108))
    folds = crossval.make_folds(ds, 4, 0)
    for subj in ds.subjects:
        parts = folds.folds[subj.subject]
        merged = np.concatenate(parts)
        assert len(np.unique(merged)) == subj.n_trials == len(merged)
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1


@criterion(9, "end-to-end smoke: simulate then rank via the command line")
def test_criterion_9_end_to_end(tmp_path):
    wins = 0
    for seed in range(5):
        sim_out = tmp_path / f"sim{seed}"
        code = cli.main(["simulate", "--out", str(sim_out), "--subjects", "4",
                         "--plan-scale", "0.15", "--seed", str(200 + seed)])
        assert code == 0
        spec_doc = tmp_path / "forstmann.spec"
        spec_doc.write_text(
            "responses: left right\n"
            "factor E: accuracy neutral speed\n"
            "factor S: left right\n"
            "match C: S -> left=left right=right\n"
            "derived E2: E -> accuracy=an neutral=an speed=sp\n")
        cv_out = tmp_path / f"cv{seed}"
        config = {
            "data": str(sim_out / "trials.csv"),
            "schema": str(spec_doc),
            "family": {"c": ["E", "1"], "v": ["C"], "tau": ["1"]},
            "method": "hybrid", "n_factors": 5, "n_mc": 5,
            "max_iters": 1200, "window": 150, "patience": 150,
            "warm_max_iters": 500,
            "folds": 5, "draws": 60, "seed": 200 + seed,
            "out": str(cv_out), "parallelism": 2,
        }
        cfg_path = tmp_path / f"cfg{seed}.json"
        cfg_path.write_text(json.dumps(config))
        assert cli.main(["cv", "--config", str(cfg_path)]) == 0
        with open(cv_out / "ranking.json") as fh:
            doc = json.load(fh)
        elpd = {m["model_index"]: m["elpd"] for m in doc["models"]}
        print(f"  seed {200 + seed}: generating elpd {elpd[1]:.2f}, null elpd {elpd[2]:.2f}")
        if elpd[1] is not None and elpd[2] is not None and elpd[1] > elpd[2]:
            wins += 1
    assert wins >= 4, f"generating model beat the null in only {wins}/5 seeds"
