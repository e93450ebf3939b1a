"""Multi-trial patient-level datasets: loading, validation and role splits.

One CSV row per participant with columns ``s, z, d, y`` followed by the
covariates. Trial labels are free strings; :class:`RoleConfig` maps them onto
the three roles used by the estimators (target, first historical trial,
second historical trial).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import (
    ConfigError,
    EmptyRole,
    MalformedRow,
    MissingRequiredColumn,
    UnknownLabel,
)

SAME_AS_H1 = "same-as-historical1"
MISSING_LEVEL = "missing"
RESERVED = ("s", "z", "d", "y")

TARGET, HIST1, HIST2 = "target", "historical1", "historical2"


@dataclass(frozen=True)
class TrialRecord:
    covariates: tuple
    z: int | None
    d: int | None
    y: int | None
    s: str


@dataclass(frozen=True)
class RoleConfig:
    """Trial labels per role plus the analysis stage.

    ``historical2`` may be :data:`SAME_AS_H1` (one historical trial supplies
    both the treatment-effect and compliance pieces) or ``None`` for post hoc
    analyses, which only use the first historical trial and the target.
    """

    target: str = "t"
    historical1: str = "h1"
    historical2: str | None = "h2"
    stage: str = "design"

    def __post_init__(self):
        if self.stage not in ("design", "posthoc"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        labels = [self.target, self.historical1]
        if self.historical2 not in (None, SAME_AS_H1):
            labels.append(self.historical2)
        if len(set(labels)) != len(labels):
            raise ConfigError(f"role labels must be distinct: {labels}")
        if self.stage == "design" and self.historical2 is None:
            raise ConfigError("design stage needs a second historical trial (or same-as-historical1)")

    @property
    def collapsed(self) -> bool:
        return self.historical2 == SAME_AS_H1

    @property
    def h2_label(self) -> str | None:
        return self.historical1 if self.collapsed else self.historical2

    def roles(self) -> dict[str, str]:
        out = {TARGET: self.target, HIST1: self.historical1}
        if self.historical2 is not None:
            out[HIST2] = self.h2_label
        return out

    def required_columns(self, role: str) -> tuple[str, ...]:
        if role == HIST1:
            return ("z", "d", "y")
        if role == HIST2:
            return ("z", "d")
        return ("z", "d") if self.stage == "posthoc" else ()

    @classmethod
    def from_dict(cls, raw: dict) -> "RoleConfig":
        known = {"target", "historical1", "historical2", "stage"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown role config keys: {sorted(extra)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "RoleConfig":
        return cls.from_dict(_read_config(path))

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "historical1": self.historical1,
            "historical2": self.historical2,
            "stage": self.stage,
        }


def _read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return raw


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Column-oriented, read-only dataset.

    ``z``, ``d`` and ``y`` are float arrays with NaN marking an absent value.
    ``X`` is the encoded covariate matrix (continuous columns as-is, one
    indicator per non-reference categorical level).
    """

    s: np.ndarray
    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    X: np.ndarray
    config: RoleConfig
    columns: tuple[str, ...] = ()
    raw: dict = field(default_factory=dict)
    encoding: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.s, self.z, self.d, self.y, self.X):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, s, z, d=None, y=None, X=None, config=None, columns=None):
        s = np.asarray(s, dtype=object)
        n = len(s)
        z = _as_binary(z, n)
        d = _as_binary(d, n)
        y = _as_binary(y, n)
        X = np.zeros((n, 0)) if X is None else np.array(X, dtype=float, ndmin=2)
        if X.shape[0] != n:
            X = X.reshape(n, -1)
        if columns is None:
            columns = tuple(f"x{j + 1}" for j in range(X.shape[1]))
        raw = {c: X[:, j].copy() for j, c in enumerate(columns)}
        enc = {c: {"type": "continuous", "columns": [c]} for c in columns}
        return cls(s, z, d, y, X, config or RoleConfig(), tuple(columns), raw, enc)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def covariate_names(self) -> list[str]:
        names = []
        for c in self.columns:
            names.extend(self.encoding[c]["columns"])
        return names

    def role_mask(self, role: str) -> np.ndarray:
        label = self.config.roles().get(role)
        if label is None:
            return np.zeros(len(self), dtype=bool)
        return self.s == label

    def records(self) -> Iterator[TrialRecord]:
        def opt(v):
            return None if np.isnan(v) else int(v)

        for i in range(len(self)):
            cov = tuple(self.raw[c][i] for c in self.columns)
            yield TrialRecord(cov, opt(self.z[i]), opt(self.d[i]), opt(self.y[i]), str(self.s[i]))

    def take(self, idx) -> "TrialDataset":
        idx = np.asarray(idx)
        return TrialDataset(
            self.s[idx].copy(), self.z[idx].copy(), self.d[idx].copy(), self.y[idx].copy(),
            self.X[idx].copy(), self.config, self.columns,
            {c: v[idx].copy() for c, v in self.raw.items()}, self.encoding,
        )

    def with_config(self, config: RoleConfig) -> "TrialDataset":
        return TrialDataset(self.s, self.z, self.d, self.y, self.X, config,
                            self.columns, self.raw, self.encoding)

    def check_roles(self, roles: Sequence[str] | None = None) -> None:
        """Raise unless every requested role has rows carrying its required columns."""
        roles = roles or list(self.config.roles())
        for role in roles:
            if role not in self.config.roles():
                from .errors import MissingRole
                raise MissingRole(f"role {role} is not declared in the role config")
            mask = self.role_mask(role)
            if not mask.any():
                raise EmptyRole(f"no rows for role {role} (label {self.config.roles()[role]!r})")
            for col in self.config.required_columns(role):
                if np.isnan(getattr(self, col)[mask]).any():
                    raise MissingRequiredColumn(
                        f"role {role} requires column {col!r} on every row")


def _as_binary(v, n):
    if v is None:
        return np.full(n, np.nan)
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape[0] != n:
        raise MalformedRow("column length differs from number of rows")
    ok = np.isnan(arr) | (arr == 0) | (arr == 1)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise MalformedRow(f"row {bad}: non-binary value {arr[bad]!r}")
    return arr


def _parse_binary(value: str, col: str, lineno: int) -> float:
    value = value.strip()
    if value == "":
        return np.nan
    if value in ("0", "1"):
        return float(value)
    raise MalformedRow(f"line {lineno}: column {col!r} must be 0/1, got {value!r}")


def load_dataset(path, schema: RoleConfig, categorical: Sequence[str] = ()) -> TrialDataset:
    """Read a participant-level CSV.

    Covariate columns are every column other than ``s, z, d, y``. A column is
    categorical if listed in ``categorical`` or if any value fails to parse as
    a number; empty categorical cells become the level ``"missing"``. Empty
    continuous cells are rejected.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedRow(f"{path} is empty") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    if "s" not in header or "z" not in header:
        raise MissingRequiredColumn("header must contain columns 's' and 'z'")
    pos = {h: i for i, h in enumerate(header)}
    covs = [h for h in header if h not in RESERVED]
    n = len(rows)
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise MalformedRow(f"line {k + 2}: expected {len(header)} fields, got {len(r)}")

    s = np.array([r[pos["s"]].strip() for r in rows], dtype=object)
    cols = {}
    for c in ("z", "d", "y"):
        if c in pos:
            cols[c] = np.array([_parse_binary(r[pos[c]], c, k + 2) for k, r in enumerate(rows)])
        else:
            cols[c] = np.full(n, np.nan)

    raw, encoding, blocks = {}, {}, []
    for c in covs:
        values = [r[pos[c]].strip() for r in rows]
        numeric = c not in categorical and all(_is_number(v) for v in values if v != "")
        if numeric:
            if any(v == "" for v in values):
                k = values.index("")
                raise MalformedRow(f"line {k + 2}: continuous covariate {c!r} is missing")
            arr = np.array([float(v) for v in values])
            raw[c] = arr
            encoding[c] = {"type": "continuous", "columns": [c]}
            blocks.append(arr[:, None])
        else:
            arr = np.array([v if v != "" else MISSING_LEVEL for v in values], dtype=object)
            levels = sorted(set(arr.tolist()))
            raw[c] = arr
            encoding[c] = {
                "type": "categorical",
                "levels": levels,
                "columns": [f"{c}[{lv}]" for lv in levels[1:]],
            }
            blocks.append(np.column_stack([(arr == lv).astype(float) for lv in levels[1:]])
                          if len(levels) > 1 else np.zeros((n, 0)))
    X = np.hstack(blocks) if blocks else np.zeros((n, 0))
    ds = TrialDataset(s, cols["z"], cols["d"], cols["y"], X, schema, tuple(covs), raw, encoding)
    roles = list(schema.roles())
    if schema.stage == "posthoc":
        roles = [TARGET, HIST1]
    ds.check_roles(roles)
    return ds


def _is_number(v: str) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def write_dataset(ds: TrialDataset, path) -> None:
    def fmt_bin(v):
        return "" if np.isnan(v) else str(int(v))

    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "z", "d", "y", *ds.columns])
        for i in range(len(ds)):
            cov = []
            for c in ds.columns:
                v = ds.raw[c][i]
                if ds.encoding[c]["type"] == "continuous":
                    cov.append(repr(float(v)))
                else:
                    cov.append("" if v == MISSING_LEVEL else str(v))
            w.writerow([ds.s[i], fmt_bin(ds.z[i]), fmt_bin(ds.d[i]), fmt_bin(ds.y[i]), *cov])


def split_by_trial(ds: TrialDataset) -> dict[str, TrialDataset]:
    """Partition rows by role. A collapsed second historical trial aliases the first."""
    roles = ds.config.roles()
    known = set(roles.values())
    unknown = sorted(set(ds.s.tolist()) - known)
    if unknown:
        raise UnknownLabel(f"trial labels not in role config: {unknown}")
    out: dict[str, TrialDataset] = {}
    for role, label in roles.items():
        if role == HIST2 and ds.config.collapsed:
            out[role] = out[HIST1]
            continue
        out[role] = ds.take(np.flatnonzero(ds.s == label))
    return out


@dataclass
class ValidationReport:
    cell_counts: dict
    covariate_summary: dict
    overlap: dict
    warnings: list

    def to_dict(self) -> dict:
        return {
            "cell_counts": self.cell_counts,
            "covariate_summary": self.covariate_summary,
            "overlap": self.overlap,
            "warnings": self.warnings,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def validate_dataset(ds: TrialDataset, bins: int = 10) -> ValidationReport:
    """Per-(trial, arm) counts, covariate summaries and a participation overlap check.

    The overlap entry for each historical trial holds the mean fitted
    probability of target membership from a logistic fit of target versus that
    trial, plus histograms of that probability within each of the two trials.
    """
    from .nuisance import GlmSpec, fit_participation

    warnings_: list[str] = []
    counts: dict = {}
    roles = ds.config.roles()
    for role, label in roles.items():
        if role == HIST2 and ds.config.collapsed:
            continue
        mask = ds.s == label
        arms = {}
        for z in (0, 1):
            arms[str(z)] = int(np.sum(mask & (ds.z == z)))
        missing_z = int(np.sum(mask & np.isnan(ds.z)))
        if missing_z:
            arms["missing"] = missing_z
        counts[label] = arms
        needs_arms = role != TARGET or ds.config.stage == "posthoc"
        if needs_arms:
            for z in ("0", "1"):
                if arms[z] == 0 and not (role == TARGET and z == "0"):
                    warnings_.append(f"trial {label!r} has an empty Z={z} arm")
        if not mask.any():
            warnings_.append(f"role {role} (label {label!r}) has no rows")

    summary = {}
    names = ds.covariate_names
    for label in sorted(set(ds.s.tolist())):
        mask = ds.s == label
        Xs = ds.X[mask]
        summary[label] = {
            name: {"mean": float(Xs[:, j].mean()), "sd": float(Xs[:, j].std(ddof=1)) if len(Xs) > 1 else 0.0}
            for j, name in enumerate(names)
        } if len(Xs) else {}

    overlap = {}
    tmask = ds.s == ds.config.target
    edges = np.linspace(0.0, 1.0, bins + 1)
    for role, label in roles.items():
        if role == TARGET or (role == HIST2 and ds.config.collapsed):
            continue
        hmask = ds.s == label
        if not (tmask.any() and hmask.any()):
            continue
        sub = ds.take(np.flatnonzero(tmask | hmask))
        model = fit_participation(sub, [ds.config.target, label], GlmSpec())
        prob_t = model.predict_proba(sub.X)[:, model.labels.index(ds.config.target)]
        in_t = sub.s == ds.config.target
        overlap[label] = {
            "mean_participation_probability": float(prob_t.mean()),
            "histogram_edges": edges.tolist(),
            "histogram_target": np.histogram(prob_t[in_t], edges)[0].tolist(),
            "histogram_historical": np.histogram(prob_t[~in_t], edges)[0].tolist(),
        }
    return ValidationReport(counts, summary, overlap, warnings_)
