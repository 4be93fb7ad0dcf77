"""Experimental-design schemas, model formulas and family enumeration.

A :class:`FactorSchema` declares the response accumulators and the factors of
an experiment.  Factors come in four kinds:

* ``trial``    -- a column of the data file; constant within a trial
                  (e.g. an emphasis manipulation).
* ``response`` -- the identity of the accumulator; its levels are the
                  response labels.
* ``match``    -- an accumulator-level factor derived from a trial factor:
                  level "match" for the accumulator that is the correct
                  response to the trial's stimulus class, "mismatch"
                  otherwise.
* ``derived``  -- a trial factor computed by coarsening another trial
                  factor's levels (used for intermediate model sizes).

A :class:`ModelSpec` assigns each parameter class (c, A, v, s, tau) a formula:
either the constant ``1`` or a ``*``-joined list of factor names.  Each class
then has one parameter cell per combination of its factors' levels, and a
subject's random-effect vector holds one log-scale entry per free cell, laid
out class by class in the order c, A, v, s, tau.  Two conventions apply:

* the drift class ``v`` is always crossed with an accumulator-level factor;
  if its formula names none, the schema's default match factor is added;
* the first cell of class ``s`` is pinned to 1 (never estimated) for scale
  identifiability; ``s ~ 1`` therefore fixes s = 1 throughout.

Natural parameters for a trial are recovered by exponentiating the entries
and setting b = exp(c-entry) + exp(A-entry), which keeps b > A.

Model/schema files use a line-based text format::

    responses: left right
    factor E: accuracy neutral speed
    factor S: left right
    match C: S -> left=left right=right
    derived E2: E -> accuracy=an neutral=an speed=sp

    [model]
    c: E
    A: 1
    v: C
    s: 1
    tau: 1
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

PARAM_CLASSES = ("c", "A", "v", "s", "tau")

MATCH_LEVELS = ("match", "mismatch")


class SpecError(ValueError):
    """Malformed schema, formula or family request."""


@dataclass(frozen=True)
class Factor:
    name: str
    kind: str                      # trial | response | match | derived
    levels: tuple[str, ...]
    source: str | None = None      # match/derived: name of the underlying trial factor
    mapping: dict[str, str] | None = None  # match: stimulus level -> correct response
                                           # derived: source level -> derived level

    @property
    def accumulator_level(self) -> bool:
        return self.kind in ("response", "match")


@dataclass(frozen=True)
class FactorSchema:
    responses: tuple[str, ...]
    factors: dict[str, Factor]

    def __post_init__(self):
        if len(set(self.responses)) != len(self.responses):
            raise SpecError("response labels must be unique")
        for f in self.factors.values():
            if len(set(f.levels)) != len(f.levels):
                raise SpecError(f"factor {f.name}: level names must be unique")
            if f.kind in ("match", "derived"):
                src = self.factors.get(f.source or "")
                if src is None or src.kind != "trial":
                    raise SpecError(f"factor {f.name}: source {f.source!r} is not a trial factor")
                missing = set(src.levels) - set(f.mapping or {})
                if missing:
                    raise SpecError(f"factor {f.name}: no mapping for source levels {sorted(missing)}")
                if f.kind == "match":
                    bad = set((f.mapping or {}).values()) - set(self.responses)
                    if bad:
                        raise SpecError(f"factor {f.name}: mapped responses {sorted(bad)} not declared")

    @property
    def n_acc(self) -> int:
        return len(self.responses)

    def factor(self, name: str) -> Factor:
        try:
            return self.factors[name]
        except KeyError:
            raise SpecError(f"unknown factor {name!r}; declared: {sorted(self.factors)}") from None

    def trial_factor_names(self) -> tuple[str, ...]:
        """Factors stored as data-file columns."""
        return tuple(n for n, f in self.factors.items() if f.kind == "trial")

    def default_match_factor(self) -> str | None:
        for n, f in self.factors.items():
            if f.kind == "match":
                return n
        for n, f in self.factors.items():
            if f.kind == "response":
                return n
        return None

    def level_arrays(self, trial_levels: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Per-factor level-index arrays of shape (n, n_acc) from trial columns.

        ``trial_levels`` maps each trial-factor name to an int array of level
        indices of shape (n,).
        """
        n = next(iter(trial_levels.values())).shape[0] if trial_levels else 0
        out = {}
        for name, f in self.factors.items():
            if f.kind == "trial":
                out[name] = np.broadcast_to(trial_levels[name][:, None], (n, self.n_acc))
            elif f.kind == "derived":
                src = self.factors[f.source]
                lut = np.array([f.levels.index(f.mapping[lv]) for lv in src.levels])
                out[name] = np.broadcast_to(lut[trial_levels[f.source]][:, None], (n, self.n_acc))
            elif f.kind == "response":
                out[name] = np.broadcast_to(np.arange(self.n_acc)[None, :], (n, self.n_acc))
            elif f.kind == "match":
                src = self.factors[f.source]
                correct = np.array([self.responses.index(f.mapping[lv]) for lv in src.levels])
                correct_acc = correct[trial_levels[f.source]]
                out[name] = np.where(np.arange(self.n_acc)[None, :] == correct_acc[:, None], 0, 1)
        return out


@dataclass(frozen=True)
class ClassLayout:
    """Cell bookkeeping for one parameter class within a ModelSpec."""

    factors: tuple[str, ...]
    level_counts: tuple[int, ...]
    n_cells: int
    offset: int          # alpha index of the first free cell
    pinned_cells: tuple[int, ...] = ()

    def alpha_index_of_cell(self, cell: int) -> int:
        if cell in self.pinned_cells:
            return -1
        return self.offset + cell - sum(1 for p in self.pinned_cells if p < cell)

    @property
    def n_free(self) -> int:
        return self.n_cells - len(self.pinned_cells)


@dataclass(frozen=True)
class ModelSpec:
    schema: FactorSchema
    formulas: dict[str, tuple[str, ...]]
    layouts: dict[str, ClassLayout] = field(default_factory=dict, compare=False)
    d_alpha: int = field(default=0, compare=False)

    @property
    def label(self) -> str:
        parts = []
        for cls in PARAM_CLASSES:
            fs = self.formulas[cls]
            parts.append(f"{cls}~{'*'.join(fs) if fs else '1'}")
        return ", ".join(parts)

    def alpha_names(self) -> list[str]:
        names: list[str] = []
        for cls in PARAM_CLASSES:
            lay = self.layouts[cls]
            levels = [self.schema.factor(f).levels for f in lay.factors]
            for cell, combo in enumerate(itertools.product(*levels) if levels else [()]):
                if lay.alpha_index_of_cell(cell) >= 0:
                    suffix = f"[{','.join(combo)}]" if combo else ""
                    names.append(f"{cls}{suffix}")
        return names

    def cell_index_arrays(self, trial_levels: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Alpha-index arrays per class for a block of trials.

        Returns, for each class, an int array of shape (n, n_acc) whose
        entries index the subject's random-effect vector (-1 for pinned
        cells).  ``tau`` is accumulator-constant but returned in the same
        shape for uniformity.
        """
        levels = self.schema.level_arrays(trial_levels)
        out = {}
        for cls in PARAM_CLASSES:
            lay = self.layouts[cls]
            n = next(iter(levels.values())).shape[0] if levels else 0
            cell = np.zeros((n, self.schema.n_acc), dtype=np.int64)
            for fname, count in zip(lay.factors, lay.level_counts):
                cell = cell * count + levels[fname]
            if lay.pinned_cells:
                lut = np.array([lay.alpha_index_of_cell(i) for i in range(lay.n_cells)])
                out[cls] = lut[cell]
            else:
                out[cls] = cell + lay.offset
        return out


def _build_layouts(schema: FactorSchema, formulas: dict[str, tuple[str, ...]]):
    layouts: dict[str, ClassLayout] = {}
    offset = 0
    for cls in PARAM_CLASSES:
        fs = formulas[cls]
        counts = tuple(len(schema.factor(f).levels) for f in fs)
        n_cells = int(np.prod(counts)) if counts else 1
        pinned = (0,) if cls == "s" else ()
        lay = ClassLayout(factors=fs, level_counts=counts, n_cells=n_cells,
                          offset=offset, pinned_cells=pinned)
        layouts[cls] = lay
        offset += lay.n_free
    return layouts, offset


def make_spec(schema: FactorSchema, formulas: dict[str, tuple[str, ...]],
              auto_cross_v: bool = True) -> ModelSpec:
    full = {cls: tuple(formulas.get(cls, ())) for cls in PARAM_CLASSES}
    for cls, fs in full.items():
        if len(set(fs)) != len(fs):
            raise SpecError(f"class {cls}: repeated factor in formula {fs}")
        for f in fs:
            schema.factor(f)
        if cls == "tau" and any(schema.factor(f).accumulator_level for f in fs):
            raise SpecError("class tau cannot vary across accumulators (shared non-decision time)")
    if auto_cross_v and not any(schema.factor(f).accumulator_level for f in full["v"]):
        default = schema.default_match_factor()
        if default is None:
            raise SpecError("class v needs an accumulator-level factor and the schema declares none")
        full["v"] = full["v"] + (default,)
    layouts, d_alpha = _build_layouts(schema, full)
    return ModelSpec(schema=schema, formulas=full, layouts=layouts, d_alpha=d_alpha)


def parse_formula(text: str, schema: FactorSchema) -> tuple[str, ...]:
    body = text.strip()
    if not body:
        raise SpecError("empty formula")
    if body == "1":
        return ()
    names = tuple(part.strip() for part in body.split("*"))
    for nm in names:
        if not nm:
            raise SpecError(f"empty factor name in formula {text!r}")
        schema.factor(nm)
    return names


def parse_spec(formulas: dict[str, str], schema: FactorSchema) -> ModelSpec:
    """Build a ModelSpec from formula strings, one per parameter class."""
    unknown = set(formulas) - set(PARAM_CLASSES)
    if unknown:
        raise SpecError(f"unknown parameter classes {sorted(unknown)}; expected {PARAM_CLASSES}")
    parsed = {}
    for cls in PARAM_CLASSES:
        text = formulas.get(cls, "1")
        try:
            parsed[cls] = parse_formula(text, schema)
        except SpecError as e:
            raise SpecError(f"class {cls}: {e}") from None
    return make_spec(schema, parsed)


def map_effects(spec: ModelSpec, alpha: np.ndarray, trial: dict[str, str]):
    """Natural per-accumulator parameters for one trial cell.

    ``trial`` maps each trial-factor name to a level label.  Returns a list
    of :class:`lbavb.lba.AccumulatorParams` ordered like ``schema.responses``.
    """
    from .lba import AccumulatorParams

    schema = spec.schema
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (spec.d_alpha,):
        raise SpecError(f"alpha has shape {alpha.shape}, expected ({spec.d_alpha},)")
    trial_levels = {}
    for name in schema.trial_factor_names():
        f = schema.factor(name)
        if name not in trial:
            raise SpecError(f"trial is missing factor {name!r}")
        if trial[name] not in f.levels:
            raise SpecError(f"factor {name!r}: unknown level {trial[name]!r}")
        trial_levels[name] = np.array([f.levels.index(trial[name])])
    idx = spec.cell_index_arrays(trial_levels)
    vals = {}
    for cls in PARAM_CLASSES:
        ix = idx[cls][0]
        vals[cls] = np.where(ix >= 0, np.exp(alpha[np.maximum(ix, 0)]), 1.0)
    out = []
    for k in range(schema.n_acc):
        out.append(AccumulatorParams(
            b=vals["c"][k] + vals["A"][k], A=vals["A"][k],
            v=vals["v"][k], s=vals["s"][k], tau=vals["tau"][k]))
    return out


# ---------------------------------------------------------------------------
# Built-in schemas for the three case-study designs

def forstmann_schema() -> FactorSchema:
    """Perceptual decisions under three emphasis conditions, two responses."""
    factors = {
        "E": Factor("E", "trial", ("accuracy", "neutral", "speed")),
        "S": Factor("S", "trial", ("left", "right")),
        "C": Factor("C", "match", MATCH_LEVELS, source="S",
                    mapping={"left": "left", "right": "right"}),
        "E2": Factor("E2", "derived", ("an", "sp"), source="E",
                     mapping={"accuracy": "an", "neutral": "an", "speed": "sp"}),
    }
    return FactorSchema(responses=("left", "right"), factors=factors)


def rae_schema() -> FactorSchema:
    """Recognition memory: old/new responses, emphasis and stimulus class."""
    factors = {
        "E": Factor("E", "trial", ("accuracy", "speed")),
        "S": Factor("S", "trial", ("old", "new")),
        "R": Factor("R", "response", ("old", "new")),
        "M": Factor("M", "match", MATCH_LEVELS, source="S",
                    mapping={"old": "old", "new": "new"}),
    }
    return FactorSchema(responses=("old", "new"), factors=factors)


def wagenmakers_schema() -> FactorSchema:
    """Lexical decisions: word/nonword responses, emphasis and word frequency."""
    factors = {
        "E": Factor("E", "trial", ("accuracy", "speed")),
        "W": Factor("W", "trial", ("hf", "lf", "vlf", "nw")),
        "C": Factor("C", "match", MATCH_LEVELS, source="W",
                    mapping={"hf": "word", "lf": "word", "vlf": "word", "nw": "nonword"}),
    }
    return FactorSchema(responses=("word", "nonword"), factors=factors)


BUILTIN_SCHEMAS = {
    "forstmann": forstmann_schema,
    "rae": rae_schema,
    "wagenmakers": wagenmakers_schema,
}


# ---------------------------------------------------------------------------
# Family enumeration

@dataclass(frozen=True)
class FamilyMember:
    index: int            # 1-based, stable
    label: str
    spec: ModelSpec


@dataclass(frozen=True)
class ModelFamily:
    kind: str
    members: tuple[FamilyMember, ...]

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def member(self, index: int) -> FamilyMember:
        for m in self.members:
            if m.index == index:
                return m
        raise SpecError(f"no model with index {index} in family {self.kind}")


def _forstmann_count_formula(count: int, emphasis: str, emphasis2: str) -> tuple[str, ...]:
    # 1 = shared across conditions; 2 = speed vs non-speed; 3 = one per condition
    return {1: (), 2: (emphasis2,), 3: (emphasis,)}[count]


def forstmann_family(schema: FactorSchema, emphasis="E", emphasis2="E2", match="C") -> ModelFamily:
    """All 27 models crossing 1/2/3 condition effects on c, v and tau.

    Enumeration follows a boustrophedon order (v direction alternates with c,
    tau direction alternates with c+v), so e.g. index 19 is model 3-1-1.
    """
    members = []
    index = 1
    for ci, c_count in enumerate((1, 2, 3)):
        v_counts = (1, 2, 3) if ci % 2 == 0 else (3, 2, 1)
        for vi, v_count in enumerate(v_counts):
            tau_counts = (1, 2, 3) if (ci + vi) % 2 == 0 else (3, 2, 1)
            for tau_count in tau_counts:
                formulas = {
                    "c": _forstmann_count_formula(c_count, emphasis, emphasis2),
                    "A": (),
                    "v": _forstmann_count_formula(v_count, emphasis, emphasis2) + (match,),
                    "s": (),
                    "tau": _forstmann_count_formula(tau_count, emphasis, emphasis2),
                }
                members.append(FamilyMember(index, f"{c_count}-{v_count}-{tau_count}",
                                            make_spec(schema, formulas)))
                index += 1
    return ModelFamily(kind="forstmann27", members=tuple(members))


def rae_family(schema: FactorSchema, emphasis="E", response="R", stimulus="S", match="M") -> ModelFamily:
    """The 16 models crossing emphasis effects on c, A, v and tau (s ~ M fixed)."""
    c_opts = ((response,), (emphasis, response))
    a_opts = ((), (emphasis,))
    v_opts = ((stimulus, match), (emphasis, stimulus, match))
    tau_opts = ((), (emphasis,))
    members = []
    index = 1
    for c_f in c_opts:
        for a_f in a_opts:
            for v_f in v_opts:
                for tau_f in tau_opts:
                    formulas = {"c": c_f, "A": a_f, "v": v_f, "s": (match,), "tau": tau_f}
                    members.append(FamilyMember(index, f"model {index}",
                                                make_spec(schema, formulas)))
                    index += 1
    return ModelFamily(kind="rae16", members=tuple(members))


# Drift-formula axis for the 256-model lexical-decision family.  The leading
# option keeps only the correct/error distinction (the simplest model that can
# do the task); options without the match factor give chance-level models that
# belong at the bottom of a screening exercise.
WAGENMAKERS_V_AXIS = (
    ("C",), ("1",), ("E",), ("W",),
    ("C", "E"), ("C", "W"), ("E", "W"), ("C", "E", "W"),
)


def wagenmakers_family(schema: FactorSchema, correct="C", emphasis="E",
                       frequency="W", v_axis=WAGENMAKERS_V_AXIS) -> ModelFamily:
    """The 256-model factorial family for the lexical-decision reanalysis.

    Axes: c and A over {1, C, E, C*E}, v over an eight-option drift axis, tau
    over {1, E}; index = mixed radix with tau fastest, then c, then A, then v.
    Model 1 is (c~1, A~1, v~C, tau~1) and model 256 is
    (c~C*E, A~C*E, v~C*E*W, tau~E).
    """
    def normalize(opt: tuple[str, ...]) -> tuple[str, ...]:
        return tuple(f for f in opt if f != "1")

    ca_opts = ((), (correct,), (emphasis,), (correct, emphasis))
    tau_opts = ((), (emphasis,))
    subst = {"C": correct, "E": emphasis, "W": frequency}
    v_opts = [tuple(subst.get(f, f) for f in normalize(opt)) for opt in v_axis]
    members = []
    for vi, v_f in enumerate(v_opts):
        for ai, a_f in enumerate(ca_opts):
            for ci, c_f in enumerate(ca_opts):
                for ti, tau_f in enumerate(tau_opts):
                    index = ((vi * 4 + ai) * 4 + ci) * 2 + ti + 1
                    formulas = {"c": c_f, "A": a_f, "v": v_f, "s": (), "tau": tau_f}
                    # options without the match factor are deliberate
                    # accumulator-constant (chance-level) drift models
                    spec = make_spec(schema, formulas, auto_cross_v=correct in v_f)
                    members.append(FamilyMember(index, f"model {index}", spec))
    members.sort(key=lambda m: m.index)
    return ModelFamily(kind="wagenmakers256", members=tuple(members))


def custom_family(schema: FactorSchema, axes: dict[str, list[str]]) -> ModelFamily:
    """Cartesian product of per-class formula options.

    ``axes`` maps parameter classes to lists of formula strings; omitted
    classes stay at ``1``.  Later classes (in c, A, v, s, tau order) vary
    fastest; indices are 1-based in enumeration order.
    """
    unknown = set(axes) - set(PARAM_CLASSES)
    if unknown:
        raise SpecError(f"unknown parameter classes in custom family: {sorted(unknown)}")
    classes = [cls for cls in PARAM_CLASSES if cls in axes]
    option_lists = [[parse_formula(text, schema) for text in axes[cls]] for cls in classes]
    members = []
    for index, combo in enumerate(itertools.product(*option_lists), start=1):
        formulas = dict(zip(classes, combo))
        members.append(FamilyMember(index, f"model {index}", make_spec(schema, formulas)))
    if not members:
        raise SpecError("custom family is empty")
    return ModelFamily(kind="custom", members=tuple(members))


def enumerate_family(kind, schema: FactorSchema) -> ModelFamily:
    if isinstance(kind, dict):
        return custom_family(schema, kind)
    if kind == "forstmann27":
        return forstmann_family(schema)
    if kind == "rae16":
        return rae_family(schema)
    if kind == "wagenmakers256":
        return wagenmakers_family(schema)
    raise SpecError(f"unknown family kind {kind!r}; "
                    "expected forstmann27, rae16, wagenmakers256 or a custom product")


# ---------------------------------------------------------------------------
# Text format

def _parse_mapping(body: str, where: str) -> dict[str, str]:
    mapping = {}
    for part in body.split():
        if "=" not in part:
            raise SpecError(f"{where}: expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        mapping[k.strip()] = v.strip()
    return mapping


def parse_schema_text(text: str) -> tuple[FactorSchema, dict[str, str]]:
    """Parse the schema (and optional [model] block) of a spec document.

    Returns (schema, model formula strings); the dict is empty when the
    document has no [model] block.
    """
    responses: tuple[str, ...] | None = None
    factors: dict[str, Factor] = {}
    model: dict[str, str] = {}
    in_model = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() == "[model]":
            in_model = True
            continue
        if ":" not in line:
            raise SpecError(f"line {lineno}: expected 'key: value', got {raw.strip()!r}")
        head, body = (part.strip() for part in line.split(":", 1))
        if in_model:
            if head not in PARAM_CLASSES:
                raise SpecError(f"line {lineno}: unknown parameter class {head!r}")
            model[head] = body
            continue
        if head == "responses":
            responses = tuple(body.split())
        elif head.startswith("factor "):
            name = head.split(None, 1)[1]
            factors[name] = Factor(name, "trial", tuple(body.split()))
        elif head.startswith("response "):
            name = head.split(None, 1)[1]
            factors[name] = Factor(name, "response", tuple(body.split()))
        elif head.startswith("match ") or head.startswith("derived "):
            kind, name = head.split(None, 1)
            if "->" not in body:
                raise SpecError(f"line {lineno}: {kind} factor needs 'SOURCE -> level=level ...'")
            source, map_body = (part.strip() for part in body.split("->", 1))
            mapping = _parse_mapping(map_body, f"line {lineno}")
            if kind == "match":
                factors[name] = Factor(name, "match", MATCH_LEVELS, source=source, mapping=mapping)
            else:
                levels = tuple(dict.fromkeys(mapping.values()))
                factors[name] = Factor(name, "derived", levels, source=source, mapping=mapping)
        else:
            raise SpecError(f"line {lineno}: unrecognized declaration {head!r}")
    if responses is None:
        raise SpecError("schema declares no 'responses:' line")
    for name, f in factors.items():
        if f.kind == "response" and f.levels != responses:
            raise SpecError(f"response factor {name}: levels must equal the response labels")
    return FactorSchema(responses=responses, factors=factors), model


def read_spec_file(path) -> tuple[FactorSchema, ModelSpec | None]:
    with open(path, "r", encoding="utf-8") as fh:
        schema, model = parse_schema_text(fh.read())
    return schema, (parse_spec(model, schema) if model else None)
