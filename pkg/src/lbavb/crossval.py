"""K-fold cross-validated model evaluation, ranking and screening.

Each subject's trials are split into K folds, stratified by condition cell so
every fold sees every condition.  For each fold the model is fitted
variationally on the remaining folds (fold 1 from the cold initialization,
later folds warm-started from fold 1's solution) and the held-out fold is
scored by

    log(1/S * sum_s p(y_fold | alpha_s)),   alpha_s ~ q_lambda,

accumulated with log-sum-exp.  A model's score is the mean of its per-fold
log predictive densities; models are ranked by score, and screening reports
carry best/worst shortlists for exact follow-up methods.
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import vb
from .data import DataError, Dataset
from .hierarchical import LbaLikelihood
from .modelspec import ModelFamily, ModelSpec

REPORT_SCHEMA_VERSION = 1


@dataclass
class FoldAssignment:
    n_folds: int
    folds: dict[str, list[np.ndarray]]   # subject -> per-fold sorted trial indices

    def heldout(self, dataset: Dataset, k: int) -> Dataset:
        from .data import subset
        return subset(dataset, {s: self.folds[s][k] for s in self.folds})

    def training(self, dataset: Dataset, k: int) -> Dataset:
        from .data import subset
        keep = {}
        for subj, parts in self.folds.items():
            keep[subj] = np.sort(np.concatenate([p for i, p in enumerate(parts) if i != k]))
        return subset(dataset, keep)


def make_folds(dataset: Dataset, n_folds: int, seed) -> FoldAssignment:
    """Within-subject random partition, stratified by condition cell.

    Trials are shuffled within each condition cell and dealt round-robin
    (continuing across cells, from a random starting fold), so per-cell and
    per-subject fold sizes each differ by at most one.
    """
    if n_folds < 2:
        raise DataError(f"need at least 2 folds, got {n_folds}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    names = dataset.schema.trial_factor_names()
    folds: dict[str, list[np.ndarray]] = {}
    for subj in dataset.subjects:
        n = subj.n_trials
        if n < n_folds:
            raise DataError(f"subject {subj.subject!r} has {n} trials, fewer than {n_folds} folds")
        by_cell = defaultdict(list)
        for i in range(n):
            cell = tuple(int(subj.factors[nm][i]) for nm in names)
            by_cell[cell].append(i)
        sequence: list[int] = []
        for cell in sorted(by_cell):
            idx = np.array(by_cell[cell])
            rng.shuffle(idx)
            sequence.extend(int(i) for i in idx)
        start = int(rng.integers(n_folds))
        buckets: list[list[int]] = [[] for _ in range(n_folds)]
        for pos, trial in enumerate(sequence):
            buckets[(start + pos) % n_folds].append(trial)
        folds[subj.subject] = [np.sort(np.array(b, dtype=np.int64)) for b in buckets]
    return FoldAssignment(n_folds=n_folds, folds=folds)


@dataclass
class ElpdReport:
    model_index: int
    label: str
    spec_label: str
    n_folds: int
    n_draws: int
    fold_scores: list[float] = field(default_factory=list)
    fold_status: list[str] = field(default_factory=list)
    fold_lambdas: list[vb.VariationalParams | None] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return bool(self.fold_status) and all(s == "ok" for s in self.fold_status)

    @property
    def elpd(self) -> float:
        if not self.ok:
            return float("nan")
        return float(np.mean(self.fold_scores))


def fold_predictive_score(heldout: Dataset, spec: ModelSpec, lam: vb.VariationalParams,
                          n_draws: int, rng: np.random.Generator) -> float:
    """log[(1/S) sum_s p(y_heldout | alpha_s)] with alpha_s drawn from q."""
    lik = LbaLikelihood(heldout, spec)
    J, D = lik.n_subjects, lik.d_alpha
    logps = np.empty(n_draws)
    for s in range(n_draws):
        theta, _, _ = vb.draw_reparam(lam, rng)
        logps[s] = lik.logp(theta[:J * D].reshape(J, D))[0]
    return float(logsumexp(logps) - np.log(n_draws))


def elpd_kcvvb(dataset: Dataset, spec: ModelSpec, config: vb.VbConfig,
               n_folds: int = 5, n_draws: int = 100, seed: int = 0,
               folds: FoldAssignment | None = None,
               model_index: int = 0, label: str = "model",
               warm_max_iters: int | None = None) -> ElpdReport:
    """K-fold ELPD estimate with warm starts after the first fold.

    ``warm_max_iters`` optionally caps the iteration budget of the
    warm-started folds (2..K); they begin at fold 1's solution, which is the
    point of the warm start, so they need far fewer updates.
    """
    seq = np.random.SeedSequence(entropy=seed)
    fold_seed, draw_seed = seq.spawn(2)
    if folds is None:
        folds = make_folds(dataset, n_folds, np.random.default_rng(fold_seed))
    report = ElpdReport(model_index=model_index, label=label, spec_label=spec.label,
                        n_folds=folds.n_folds, n_draws=n_draws)
    warm: vb.VariationalParams | None = None
    fit_seeds = fold_seed.spawn(folds.n_folds)
    draw_rng = np.random.default_rng(draw_seed)
    for k in range(folds.n_folds):
        train = folds.training(dataset, k)
        heldout = folds.heldout(dataset, k)
        overrides = {"seed": int(fit_seeds[k].generate_state(1)[0]),
                     "init": warm if k > 0 else config.init}
        if k > 0 and warm_max_iters is not None:
            overrides["max_iters"] = warm_max_iters
        fold_config = vb.VbConfig(**{**config.__dict__, **overrides})
        try:
            result = vb.run_vb(train, spec, fold_config)
        except vb.VbDivergenceError as exc:
            report.fold_scores.append(float("nan"))
            report.fold_status.append(f"diverged: {exc}")
            report.fold_lambdas.append(None)
            continue
        if k == 0:
            warm = result.lam
        score = fold_predictive_score(heldout, spec, result.lam, n_draws, draw_rng)
        report.fold_scores.append(score)
        report.fold_status.append("ok")
        report.fold_lambdas.append(result.lam)
        report.diagnostics[f"fold_{k + 1}_iterations"] = result.diagnostics["n_iterations"]
    return report


@dataclass
class ModelRanking:
    entries: list[tuple[int, ElpdReport]]   # (rank, report), rank 1 = best

    def __iter__(self):
        return iter(self.entries)

    def rank_of(self, model_index: int) -> int:
        for rank, report in self.entries:
            if report.model_index == model_index:
                return rank
        raise KeyError(f"model {model_index} not in ranking")

    def as_rank_dict(self) -> dict[int, int]:
        return {report.model_index: rank for rank, report in self.entries}


def rank_models(reports: list[ElpdReport]) -> ModelRanking:
    """Descending by ELPD; ties broken by model index; failed models ranked last."""
    if not reports:
        raise ValueError("no reports to rank")

    def key(r: ElpdReport):
        return (0, -r.elpd, r.model_index) if r.ok else (1, 0.0, r.model_index)

    ordered = sorted(reports, key=key)
    return ModelRanking(entries=[(i + 1, r) for i, r in enumerate(ordered)])


def spearman_rank_corr(ranks_a: dict, ranks_b: dict) -> float:
    """Spearman rho between two rankings of the same items (no ties)."""
    if set(ranks_a) != set(ranks_b):
        raise ValueError("rankings cover different model sets")
    keys = sorted(ranks_a)
    d2 = sum((ranks_a[k] - ranks_b[k]) ** 2 for k in keys)
    n = len(keys)
    if n < 2:
        raise ValueError("need at least two items")
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


@dataclass
class ScreeningReport:
    ranking: ModelRanking
    reports: list[ElpdReport]
    best: list[ElpdReport]
    worst: list[ElpdReport]
    n_failed: int


def _screen_one(payload):
    dataset, spec, config, n_folds, n_draws, seed, index, label, warm_max_iters = payload
    try:
        return elpd_kcvvb(dataset, spec, config, n_folds=n_folds, n_draws=n_draws,
                          seed=seed, model_index=index, label=label,
                          warm_max_iters=warm_max_iters)
    except Exception as exc:  # per-model failures recorded, not raised
        report = ElpdReport(model_index=index, label=label, spec_label=spec.label,
                            n_folds=n_folds, n_draws=n_draws)
        report.fold_status = [f"failed: {exc}"]
        report.fold_scores = [float("nan")]
        return report


def screen_models(family: ModelFamily, dataset: Dataset, config: vb.VbConfig,
                  n_folds: int = 5, n_draws: int = 100, seed: int = 0,
                  shortlist: int = 10, n_jobs: int | None = None,
                  warm_max_iters: int | None = None) -> ScreeningReport:
    """Estimate ELPD for every model in the family and rank them.

    Models run independently (in processes when n_jobs > 1); each gets a seed
    derived from (seed, model index) so results do not depend on scheduling.
    """
    if len(family) == 0:
        raise ValueError("empty model family")
    payloads = [
        (dataset, m.spec, config, n_folds, n_draws,
         int(np.random.SeedSequence(entropy=seed, spawn_key=(m.index,)).generate_state(1)[0]),
         m.index, m.label, warm_max_iters)
        for m in family
    ]
    n_jobs = n_jobs if n_jobs is not None else (os.cpu_count() or 1)
    n_jobs = max(1, min(n_jobs, len(payloads)))
    if n_jobs == 1:
        reports = [_screen_one(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            reports = list(pool.map(_screen_one, payloads))
    ranking = rank_models(reports)
    ok = [r for _, r in ranking.entries if r.ok]
    m = min(shortlist, len(ok))
    return ScreeningReport(
        ranking=ranking,
        reports=reports,
        best=ok[:m],
        worst=ok[len(ok) - m:],
        n_failed=sum(1 for r in reports if not r.ok),
    )


# ---------------------------------------------------------------------------
# Report emission

def write_ranking_csv(ranking: ModelRanking, path) -> None:
    n_folds = max(r.n_folds for _, r in ranking.entries)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "model_index", "label", "spec", "elpd",
                         *[f"fold_{k + 1}" for k in range(n_folds)], "status"])
        for rank, r in ranking.entries:
            scores = [f"{s:.6f}" if np.isfinite(s) else "" for s in r.fold_scores]
            scores += [""] * (n_folds - len(scores))
            status = "ok" if r.ok else ";".join(s for s in r.fold_status if s != "ok")
            writer.writerow([rank, r.model_index, r.label, r.spec_label,
                             f"{r.elpd:.6f}" if r.ok else "", *scores, status])


def write_ranking_json(ranking: ModelRanking, path, extra: dict | None = None) -> None:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "models": [
            {
                "rank": rank,
                "model_index": r.model_index,
                "label": r.label,
                "spec": r.spec_label,
                "elpd": r.elpd if r.ok else None,
                "fold_scores": [s if np.isfinite(s) else None for s in r.fold_scores],
                "fold_status": r.fold_status,
                "n_draws": r.n_draws,
                "diagnostics": r.diagnostics,
            }
            for rank, r in ranking.entries
        ],
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
