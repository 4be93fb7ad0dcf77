"""Trial datasets: in-memory containers and the CSV interchange format.

The trial file is a UTF-8 CSV with a header row and the columns
``subject``, one column per declared trial factor, ``response`` (an
accumulator label) and ``rt`` (seconds, decimal).  Rows are grouped by
subject; factor levels are stored as integer codes against the schema's
declared level order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .modelspec import FactorSchema


class DataError(ValueError):
    """Malformed or schema-inconsistent trial data."""


@dataclass
class SubjectData:
    subject: str
    factors: dict[str, np.ndarray]   # trial-factor name -> level codes, shape (n,)
    response: np.ndarray             # accumulator indices, shape (n,)
    rt: np.ndarray                   # seconds, shape (n,)

    @property
    def n_trials(self) -> int:
        return self.rt.shape[0]

    def take(self, idx: np.ndarray) -> "SubjectData":
        return SubjectData(
            subject=self.subject,
            factors={k: v[idx] for k, v in self.factors.items()},
            response=self.response[idx],
            rt=self.rt[idx],
        )


@dataclass
class Dataset:
    schema: FactorSchema
    subjects: list[SubjectData] = field(default_factory=list)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_trials(self) -> int:
        return sum(s.n_trials for s in self.subjects)

    def counts(self) -> dict[str, dict[tuple, int]]:
        """Per-subject trial counts per trial-factor cell."""
        names = self.schema.trial_factor_names()
        out = {}
        for s in self.subjects:
            cells = list(zip(*(s.factors[n] for n in names))) if names else [() for _ in range(s.n_trials)]
            tally: dict[tuple, int] = {}
            for cell in cells:
                key = tuple(self.schema.factor(n).levels[c] for n, c in zip(names, cell))
                tally[key] = tally.get(key, 0) + 1
            out[s.subject] = tally
        return out


def ingest_csv(path, schema: FactorSchema) -> Dataset:
    """Read a trial CSV, validating every row against the schema.

    Errors carry the 1-based file line number of the offending row.
    """
    factor_names = schema.trial_factor_names()
    required = ["subject", *factor_names, "response", "rt"]
    per_subject: dict[str, dict[str, list]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            lineno = reader.line_num
            vals = {c: (row.get(c) or "").strip() for c in required}
            empty = [c for c in required if not vals[c]]
            if empty:
                raise DataError(f"{path}:{lineno}: missing value for {empty[0]!r}")
            try:
                rt = float(vals["rt"])
            except ValueError:
                raise DataError(f"{path}:{lineno}: rt {vals['rt']!r} is not a number") from None
            if not np.isfinite(rt) or rt <= 0:
                raise DataError(f"{path}:{lineno}: rt must be a positive number, got {vals['rt']}")
            if vals["response"] not in schema.responses:
                raise DataError(f"{path}:{lineno}: unknown response {vals['response']!r}; "
                                f"declared: {list(schema.responses)}")
            codes = {}
            for name in factor_names:
                levels = schema.factor(name).levels
                if vals[name] not in levels:
                    raise DataError(f"{path}:{lineno}: factor {name}: unknown level "
                                    f"{vals[name]!r}; declared: {list(levels)}")
                codes[name] = levels.index(vals[name])
            subj = vals["subject"]
            if subj not in per_subject:
                per_subject[subj] = {"response": [], "rt": [], **{n: [] for n in factor_names}}
                order.append(subj)
            store = per_subject[subj]
            store["response"].append(schema.responses.index(vals["response"]))
            store["rt"].append(rt)
            for name in factor_names:
                store[name].append(codes[name])
    subjects = []
    for subj in order:
        store = per_subject[subj]
        subjects.append(SubjectData(
            subject=subj,
            factors={n: np.array(store[n], dtype=np.int64) for n in factor_names},
            response=np.array(store["response"], dtype=np.int64),
            rt=np.array(store["rt"], dtype=float),
        ))
    return Dataset(schema=schema, subjects=subjects)


def write_csv(dataset: Dataset, path) -> None:
    names = dataset.schema.trial_factor_names()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", *names, "response", "rt"])
        for s in dataset.subjects:
            for i in range(s.n_trials):
                row = [s.subject]
                row += [dataset.schema.factor(n).levels[s.factors[n][i]] for n in names]
                row.append(dataset.schema.responses[s.response[i]])
                row.append(f"{s.rt[i]:.9g}")
                writer.writerow(row)


def subset(dataset: Dataset, trial_indices: dict[str, np.ndarray]) -> Dataset:
    """New dataset keeping, per subject, only the given trial indices."""
    subjects = [s.take(np.asarray(trial_indices[s.subject], dtype=np.int64))
                for s in dataset.subjects]
    return Dataset(schema=dataset.schema, subjects=subjects)
