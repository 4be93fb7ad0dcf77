"""Synthetic-data generation, posterior predictive checks and sensitivity curves.

The generator draws each subject's random effects from the group-level
normal, maps them to natural accumulator parameters per condition cell, and
simulates the planned number of trials per cell.  The predictive tools draw
parameter vectors from a fitted variational posterior, simulate one response
per observed trial, and summarize RT distributions split by condition and
correct/incorrect response.  Sensitivity curves count, across replications,
how often the data-generating model ranks in the top r of a family screening.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde

from . import vb
from .crossval import screen_models
from .data import Dataset, SubjectData
from .lba import simulate_trials
from .modelspec import ModelFamily, ModelSpec, map_effects, parse_spec


@dataclass
class GeneratingConfig:
    spec: ModelSpec
    mu_alpha: np.ndarray
    sigma_alpha: np.ndarray
    n_subjects: int
    plan: list[tuple[dict[str, str], int]]   # (trial-factor cell, trial count)
    seed: int = 0


def forstmann_plan(schema) -> list[tuple[dict[str, str], int]]:
    """350 accuracy + 350 neutral + 300 speed trials, balanced over stimulus side."""
    plan = []
    for emphasis, total in (("accuracy", 350), ("neutral", 350), ("speed", 300)):
        for stim in schema.factor("S").levels:
            plan.append(({"E": emphasis, "S": stim}, total // 2))
    return plan


def forstmann_truth(schema):
    """Group-level truth used by tests and examples (stand-in fixture).

    The published generating values are not available, so these are chosen to
    produce the qualitative pattern of the original experiment: higher
    thresholds (slower, more accurate responding) under accuracy emphasis,
    comfortably above-chance accuracy everywhere.  Validated against the
    quadrature oracle in the simulation-study tests.
    """
    spec = parse_spec({"c": "E", "A": "1", "v": "C", "s": "1", "tau": "1"}, schema)
    # alpha order: c[accuracy], c[neutral], c[speed], A, v[match], v[mismatch], tau
    natural = np.array([1.2, 1.0, 0.6, 0.8, 3.0, 1.0, 0.2])
    mu_alpha = np.log(natural)
    base_sd = np.array([0.25, 0.25, 0.25, 0.3, 0.15, 0.3, 0.2])
    corr = 0.8 * np.eye(7) + 0.2 * np.ones((7, 7))
    sigma_alpha = np.outer(base_sd, base_sd) * corr
    return spec, mu_alpha, sigma_alpha


def generate_dataset(cfg: GeneratingConfig) -> Dataset:
    """Simulate a full hierarchical dataset; bit-reproducible given the seed."""
    return generate_dataset_with_effects(cfg)[0]


def generate_dataset_with_effects(cfg: GeneratingConfig) -> tuple[Dataset, np.ndarray]:
    """As :func:`generate_dataset`, also returning the drawn effects (J, D)."""
    schema = cfg.spec.schema
    names = schema.trial_factor_names()
    root = np.random.SeedSequence(entropy=cfg.seed)
    subject_seeds = root.spawn(cfg.n_subjects)
    subjects = []
    alphas = np.empty((cfg.n_subjects, cfg.spec.d_alpha))
    width = max(2, len(str(cfg.n_subjects)))
    for j in range(cfg.n_subjects):
        rng = np.random.default_rng(subject_seeds[j])
        alpha = rng.multivariate_normal(cfg.mu_alpha, cfg.sigma_alpha)
        alphas[j] = alpha
        cols: dict[str, list[int]] = {n: [] for n in names}
        responses: list[int] = []
        rts: list[float] = []
        subject_id = f"s{j + 1:0{width}d}"
        for cell, count in cfg.plan:
            if count <= 0:
                continue
            params = map_effects(cfg.spec, alpha, cell)
            b = np.array([p.b for p in params])
            A = np.array([p.A for p in params])
            v = np.array([p.v for p in params])
            s = np.array([p.s for p in params])
            tau = np.array([p.tau for p in params])
            try:
                choices, times = simulate_trials(b, A, v, s, tau, count, rng)
            except RuntimeError as exc:
                raise RuntimeError(f"subject {subject_id}, condition {cell}: {exc}") from exc
            responses.extend(int(c) for c in choices)
            rts.extend(float(t) for t in times)
            for n in names:
                cols[n].extend([schema.factor(n).levels.index(cell[n])] * count)
        subjects.append(SubjectData(
            subject=subject_id,
            factors={n: np.array(cols[n], dtype=np.int64) for n in names},
            response=np.array(responses, dtype=np.int64),
            rt=np.array(rts, dtype=float),
        ))
    return Dataset(schema=schema, subjects=subjects), alphas


# ---------------------------------------------------------------------------
# Posterior predictive

def _condition_factors(spec: ModelSpec) -> tuple[str, ...]:
    used = set()
    for fs in spec.formulas.values():
        for name in fs:
            f = spec.schema.factor(name)
            if f.kind == "trial":
                used.add(name)
            elif f.kind == "derived":
                used.add(f.source)
    return tuple(n for n in spec.schema.trial_factor_names() if n in used)


def _correct_response_lut(schema) -> tuple[str, np.ndarray] | None:
    for name, f in schema.factors.items():
        if f.kind == "match":
            src = schema.factor(f.source)
            lut = np.array([schema.responses.index(f.mapping[lv]) for lv in src.levels])
            return f.source, lut
    return None


@dataclass
class PredictiveCell:
    condition: tuple[str, ...]
    correct: bool
    n: int
    rt_mean: float
    rt_sd: float
    proportion: float            # share of the condition's responses
    kde_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kde_density: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class PredictiveResult:
    cells: list[PredictiveCell]
    datasets: list[Dataset]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["condition", "correct", "n", "proportion", "rt_mean", "rt_sd"])
            for c in self.cells:
                writer.writerow(["/".join(c.condition), int(c.correct), c.n,
                                 f"{c.proportion:.6f}", f"{c.rt_mean:.6f}", f"{c.rt_sd:.6f}"])


def posterior_predictive(draws, spec: ModelSpec, dataset: Dataset, n_draws: int,
                         rng: np.random.Generator, keep_datasets: bool = True,
                         kde_points: int = 128) -> PredictiveResult:
    """Simulate the observed trial plan under parameter draws.

    ``draws`` is either a fitted :class:`lbavb.vb.VariationalParams` (alpha
    vectors are drawn from it) or an array of shape (n_draws, J, D) of
    random-effect draws.  Each draw produces one simulated response per
    observed trial; summaries pool the draws by condition x correctness.
    """
    schema = dataset.schema
    J, D = dataset.n_subjects, spec.d_alpha
    if isinstance(draws, vb.VariationalParams):
        alpha_draws = np.empty((n_draws, J, D))
        for s in range(n_draws):
            theta, _, _ = vb.draw_reparam(draws, rng)
            alpha_draws[s] = theta[:J * D].reshape(J, D)
    else:
        alpha_draws = np.asarray(draws, dtype=float)
        if alpha_draws.shape != (n_draws, J, D):
            raise ValueError(f"draws have shape {alpha_draws.shape}, expected {(n_draws, J, D)}")

    cond_names = _condition_factors(spec)
    match_info = _correct_response_lut(schema)
    names = schema.trial_factor_names()
    pooled: dict[tuple, list[np.ndarray]] = {}
    out_datasets = []
    for s in range(n_draws):
        sim_subjects = []
        for j, subj in enumerate(dataset.subjects):
            alpha = alpha_draws[s, j]
            cells, inverse = np.unique(
                np.stack([subj.factors[n] for n in names], axis=1) if names
                else np.zeros((subj.n_trials, 0), dtype=int),
                axis=0, return_inverse=True)
            responses = np.empty(subj.n_trials, dtype=np.int64)
            rts = np.empty(subj.n_trials)
            for ci, cell in enumerate(cells):
                idx = np.where(inverse == ci)[0]
                trial = {n: schema.factor(n).levels[cell[k]] for k, n in enumerate(names)}
                params = map_effects(spec, alpha, trial)
                choices, times = simulate_trials(
                    np.array([p.b for p in params]), np.array([p.A for p in params]),
                    np.array([p.v for p in params]), np.array([p.s for p in params]),
                    np.array([p.tau for p in params]), idx.size, rng)
                responses[idx] = choices
                rts[idx] = times
            sim_subjects.append(SubjectData(
                subject=subj.subject,
                factors={n: subj.factors[n].copy() for n in names},
                response=responses, rt=rts))
            # pool by condition cell and correctness
            cond_levels = tuple(
                np.array([schema.factor(n).levels[c] for c in sim_subjects[-1].factors[n]])
                for n in cond_names)
            if match_info is not None:
                src, lut = match_info
                correct = responses == lut[subj.factors[src]]
            else:
                correct = responses == 0
            cond_keys = list(zip(*cond_levels)) if cond_names else [()] * subj.n_trials
            for i, key in enumerate(cond_keys):
                pooled.setdefault((key, bool(correct[i])), []).append(rts[i])
        if keep_datasets:
            out_datasets.append(Dataset(schema=schema, subjects=sim_subjects))

    cond_totals: dict[tuple, int] = {}
    for (key, _), values in pooled.items():
        cond_totals[key] = cond_totals.get(key, 0) + len(values)
    cells = []
    for (key, correct), values in sorted(pooled.items(), key=lambda kv: (kv[0][0], not kv[0][1])):
        arr = np.array(values, dtype=float)
        if arr.size >= 2 and arr.std() > 0:
            kde = gaussian_kde(arr, bw_method="silverman")
            grid = np.linspace(arr.min(), arr.max(), kde_points)
            dens = kde(grid)
        else:
            grid = dens = np.zeros(0)
        cells.append(PredictiveCell(
            condition=key, correct=correct, n=arr.size,
            rt_mean=float(arr.mean()), rt_sd=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            proportion=arr.size / cond_totals[key],
            kde_grid=grid, kde_density=dens))
    return PredictiveResult(cells=cells, datasets=out_datasets)


# ---------------------------------------------------------------------------
# Sensitivity study

@dataclass
class SensitivityCurve:
    family_size: int
    ranks: list[int]                  # generating-model rank per completed replication
    n_failed: int = 0

    @property
    def n_replications(self) -> int:
        return len(self.ranks)

    def counts(self) -> np.ndarray:
        """f(r) = number of completed replications with rank <= r."""
        f = np.zeros(self.family_size, dtype=int)
        for rank in self.ranks:
            f[rank - 1:] += 1
        return f

    def to_csv(self, path) -> None:
        f = self.counts()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["r", "count", "fraction"])
            for r in range(self.family_size):
                frac = f[r] / self.n_replications if self.n_replications else float("nan")
                writer.writerow([r + 1, int(f[r]), f"{frac:.6f}"])


def sensitivity_study(family: ModelFamily, generating_index: int, cfg: GeneratingConfig,
                      vb_config: vb.VbConfig, n_replications: int, n_folds: int = 5,
                      n_draws: int = 100, seed: int = 0, n_jobs: int | None = None,
                      warm_max_iters: int | None = None, progress=None) -> SensitivityCurve:
    """Replicate generate -> screen -> rank and tally the generating model's rank."""
    family.member(generating_index)   # validates membership
    curve = SensitivityCurve(family_size=len(family), ranks=[])
    root = np.random.SeedSequence(entropy=seed)
    rep_seeds = root.spawn(n_replications)
    for rep in range(n_replications):
        rep_seed = int(rep_seeds[rep].generate_state(1)[0])
        data_cfg = GeneratingConfig(spec=cfg.spec, mu_alpha=cfg.mu_alpha,
                                    sigma_alpha=cfg.sigma_alpha, n_subjects=cfg.n_subjects,
                                    plan=cfg.plan, seed=rep_seed)
        try:
            dataset = generate_dataset(data_cfg)
            screening = screen_models(family, dataset, vb_config, n_folds=n_folds,
                                      n_draws=n_draws, seed=rep_seed, n_jobs=n_jobs,
                                      warm_max_iters=warm_max_iters)
            rank = screening.ranking.rank_of(generating_index)
        except Exception:
            curve.n_failed += 1
            continue
        curve.ranks.append(rank)
        if progress is not None:
            progress(rep + 1, n_replications, rank)
    return curve
