"""Hospitalization line lists: validation, stratum rates, indirect standardization.

Records live in a pandas DataFrame with canonical columns (see ``CANONICAL``);
``PatientRecord`` is the row type for callers building lists by hand.
"""

from __future__ import annotations

import datetime as dt
import io
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import InputError

log = logging.getLogger(__name__)

RISK_FACTORS = (
    "postpartum",
    "cardiovascular",
    "hematologic",
    "down_syndrome",
    "liver",
    "asthma",
    "diabetes",
    "neurologic",
    "pneumopathy",
    "immunodeficiency",
    "kidney",
    "obesity",
)

CANONICAL = ("age", "sex", "unit_id", "hosp_date", "outcome", "outcome_date", "private_care") + RISK_FACTORS

_TRUE = {"1", "true", "yes", "y", "sim", "t"}
_FALSE = {"0", "false", "no", "n", "nao", "não", "f", ""}
_SEX = {"male": "male", "m": "male", "masculino": "male", "female": "female", "f": "female", "feminino": "female"}
_OUTCOME = {"death": "death", "died": "death", "obito": "death", "discharge": "discharge", "cure": "discharge",
            "cura": "discharge"}


@dataclass(frozen=True)
class ColumnMap:
    """Source column names for each canonical field."""

    age: str = "age"
    sex: str = "sex"
    unit_id: str = "unit_id"
    hosp_date: str = "hosp_date"
    outcome: str = "outcome"
    outcome_date: str = "outcome_date"
    private_care: str = "private_care"
    risk_factors: tuple[str, ...] = RISK_FACTORS

    def source(self) -> dict[str, str]:
        m = {k: getattr(self, k) for k in ("age", "sex", "unit_id", "hosp_date", "outcome", "outcome_date",
                                            "private_care")}
        m.update(dict(zip(RISK_FACTORS, self.risk_factors)))
        return m


@dataclass(frozen=True)
class PatientRecord:
    age: int
    sex: str
    unit_id: str
    hospitalization_date: dt.date
    outcome: str
    outcome_date: dt.date
    risk_factors: frozenset = frozenset()
    private_care: bool = False

    def __post_init__(self):
        if self.age < 0:
            raise InputError("age must be >= 0")
        if self.sex not in ("male", "female"):
            raise InputError(f"sex must be male/female, got {self.sex!r}")
        if self.outcome not in ("death", "discharge"):
            raise InputError(f"outcome must be death/discharge, got {self.outcome!r}")
        if self.outcome_date < self.hospitalization_date:
            raise InputError("outcome_date precedes hospitalization_date")
        unknown = set(self.risk_factors) - set(RISK_FACTORS)
        if unknown:
            raise InputError(f"unknown risk factors {sorted(unknown)}")


def records_frame(records: Iterable[PatientRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        row = {
            "age": r.age, "sex": r.sex, "unit_id": r.unit_id,
            "hosp_date": pd.Timestamp(r.hospitalization_date), "outcome": r.outcome,
            "outcome_date": pd.Timestamp(r.outcome_date), "private_care": bool(r.private_care),
        }
        row.update({f: f in r.risk_factors for f in RISK_FACTORS})
        rows.append(row)
    df = pd.DataFrame(rows, columns=list(CANONICAL))
    return _typed(df)


def _typed(df: pd.DataFrame) -> pd.DataFrame:
    df = df.astype({"age": "int64", "sex": "object", "unit_id": "object", "outcome": "object",
                    "private_care": "bool", **{f: "bool" for f in RISK_FACTORS}})
    df["hosp_date"] = pd.to_datetime(df["hosp_date"])
    df["outcome_date"] = pd.to_datetime(df["outcome_date"])
    df["death"] = df["outcome"] == "death"
    return df.reset_index(drop=True)


@dataclass
class RejectionReport:
    counts: Counter = field(default_factory=Counter)
    rows: list[tuple[int, str]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, line: int, reason: str):
        self.counts[reason] += 1
        self.rows.append((line, reason))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["line", "reason"])


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return source.decode("utf-8")
    if isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source
                                           and os.path.exists(source)):
        with open(source, encoding="utf-8") as fh:
            return fh.read()
    if isinstance(source, str):
        return source
    raise InputError(f"cannot read line list from {type(source).__name__}")


def validate_records(
    source,
    columns: ColumnMap = ColumnMap(),
    window: tuple[dt.date, dt.date] | None = None,
    known_units: Iterable[str] | None = None,
) -> tuple[pd.DataFrame, RejectionReport]:
    """Parse a CSV line list strictly; every bad row is rejected with a reason and its line number.

    ``source`` is CSV text, a path, or an already-loaded DataFrame of strings.
    """
    report = RejectionReport()
    if isinstance(source, pd.DataFrame):
        raw = source.astype(str).replace({"nan": "", "None": ""})
    else:
        text = _read_text(source)
        if not text.strip():
            return records_frame([]), report
        try:
            raw = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
        except (pd.errors.ParserError, UnicodeDecodeError) as exc:
            raise InputError(f"unparseable line list: {exc}") from None
    src = columns.source()
    missing_cols = [c for k, c in src.items() if c not in raw.columns and k in ("age", "sex", "unit_id",
                                                                                "hosp_date", "outcome",
                                                                                "outcome_date")]
    if missing_cols:
        raise InputError(f"line list lacks required columns {missing_cols}")
    known = set(known_units) if known_units is not None else None

    out = {k: [] for k in CANONICAL}
    for pos, row in enumerate(raw.itertuples(index=False)):
        rec = dict(zip(raw.columns, row))
        line = pos + 2
        reason = None
        vals = {k: str(rec.get(c, "")).strip() for k, c in src.items()}
        for req in ("age", "sex", "unit_id", "hosp_date", "outcome_date", "outcome"):
            if vals[req] == "":
                reason = f"missing {req}"
                break
        if reason is None:
            reason, parsed = _parse_row(vals)
        if reason is None and window is not None:
            if not (window[0] <= parsed["hosp_date"] <= window[1]):
                reason = "outside window"
        if reason is None and known is not None and parsed["unit_id"] not in known:
            reason = "unknown unit"
        if reason is not None:
            report.add(line, reason)
            continue
        for k in CANONICAL:
            out[k].append(parsed[k])
    for line, reason in report.rows:
        log.debug("rejected line %d: %s", line, reason)
    if report.total:
        log.info("rejected %d rows: %s", report.total, dict(report.counts))
    return _typed(pd.DataFrame(out, columns=list(CANONICAL))), report


def _parse_flag(text: str) -> bool | None:
    t = text.lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    return None


def _parse_row(vals: dict[str, str]):
    parsed = {}
    try:
        age = float(vals["age"])
    except ValueError:
        return "bad age", None
    if age < 0 or age != int(age):
        return "bad age", None
    parsed["age"] = int(age)
    sex = _SEX.get(vals["sex"].lower())
    if sex is None:
        return "bad sex", None
    parsed["sex"] = sex
    parsed["unit_id"] = vals["unit_id"]
    try:
        parsed["hosp_date"] = dt.date.fromisoformat(vals["hosp_date"])
        parsed["outcome_date"] = dt.date.fromisoformat(vals["outcome_date"])
    except ValueError:
        return "bad date", None
    outcome = _OUTCOME.get(vals["outcome"].lower())
    if outcome is None:
        return "bad outcome", None
    parsed["outcome"] = outcome
    if parsed["outcome_date"] < parsed["hosp_date"]:
        return "date order", None
    for k in ("private_care",) + RISK_FACTORS:
        flag = _parse_flag(vals[k])
        if flag is None:
            return f"bad {k}", None
        parsed[k] = flag
    return None, parsed


# -- strata -----------------------------------------------------------------

@dataclass(frozen=True)
class Strata:
    """Age bands (lower edges, last band open) crossed with sex, band-major order."""

    age_edges: tuple[int, ...] = (0, 20, 40, 60)
    sexes: tuple[str, ...] = ("male", "female")

    def __post_init__(self):
        if self.age_edges[0] != 0 or list(self.age_edges) != sorted(set(self.age_edges)):
            raise InputError("age_edges must start at 0 and increase strictly")

    @property
    def band_labels(self) -> list[str]:
        e = self.age_edges
        return [f"{e[k]}-{e[k + 1] - 1}" for k in range(len(e) - 1)] + [f"{e[-1]}+"]

    @property
    def cells(self) -> list[tuple[str, str]]:
        return [(b, s) for b in self.band_labels for s in self.sexes]

    def __len__(self):
        return len(self.age_edges) * len(self.sexes)

    def band_index(self, age) -> np.ndarray:
        return np.searchsorted(np.asarray(self.age_edges), np.asarray(age), side="right") - 1

    def code(self, records: pd.DataFrame) -> np.ndarray:
        sex_idx = pd.Categorical(records["sex"], categories=list(self.sexes)).codes
        if (sex_idx < 0).any():
            raise InputError("record sex outside strata definition")
        return self.band_index(records["age"].to_numpy()) * len(self.sexes) + sex_idx


@dataclass(frozen=True)
class StratumTable:
    strata: Strata
    hospitalizations: np.ndarray
    deaths: np.ndarray

    @property
    def rates(self) -> np.ndarray:
        h = self.hospitalizations
        return np.divide(self.deaths, h, out=np.zeros(len(h)), where=h > 0)

    @property
    def empty(self) -> np.ndarray:
        return self.hospitalizations == 0

    def rate(self, band: str, sex: str) -> float:
        return float(self.rates[self.strata.cells.index((band, sex))])

    def to_frame(self) -> pd.DataFrame:
        cells = self.strata.cells
        return pd.DataFrame({
            "age_band": [c[0] for c in cells], "sex": [c[1] for c in cells],
            "hospitalizations": self.hospitalizations, "deaths": self.deaths,
            "rate": self.rates, "empty": self.empty,
        })


def stratum_rates(records: pd.DataFrame, strata: Strata = Strata()) -> StratumTable:
    """Citywide death rate per (age band, sex); empty strata get rate 0 and are flagged."""
    code = strata.code(records)
    k = len(strata)
    hosp = np.bincount(code, minlength=k).astype(np.int64)
    deaths = np.bincount(code, weights=records["death"].to_numpy(dtype=float), minlength=k).astype(np.int64)
    table = StratumTable(strata, hosp, deaths)
    if table.empty.any():
        log.warning("empty strata: %s", [c for c, e in zip(strata.cells, table.empty) if e])
    return table


# -- per-unit counts ------------------------------------------------------------

@dataclass(frozen=True)
class UnitCounts:
    unit_ids: tuple[str, ...]
    n: np.ndarray  # units x strata hospitalizations
    observed: np.ndarray
    expected: np.ndarray

    @property
    def hospitalizations(self) -> np.ndarray:
        return self.n.sum(axis=1)

    @property
    def hcfr(self) -> np.ndarray:
        h = self.hospitalizations
        return np.divide(self.observed, h, out=np.full(len(h), np.nan), where=h > 0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "unit_id": list(self.unit_ids), "hosp": self.hospitalizations, "deaths": self.observed,
            "expected": self.expected, "hcfr": self.hcfr,
        })


def unit_stratum_counts(records: pd.DataFrame, unit_ids: Sequence[str], strata: Strata = Strata()):
    """Hospitalizations per (unit, stratum) and deaths per unit, in ``unit_ids`` order."""
    idx = pd.Index(list(unit_ids))
    u = idx.get_indexer(records["unit_id"])
    if (u < 0).any():
        bad = sorted(set(records["unit_id"][u < 0]))[:5]
        raise InputError(f"records reference units not in the unit list, e.g. {bad}")
    k = len(strata)
    code = strata.code(records)
    n = np.zeros((len(idx), k), dtype=np.int64)
    np.add.at(n, (u, code), 1)
    deaths = np.bincount(u, weights=records["death"].to_numpy(dtype=float), minlength=len(idx))
    return n, deaths.astype(np.int64)


def expected_deaths(n, table: StratumTable) -> np.ndarray:
    """E_i = sum_s n_is * rate_s."""
    n = np.atleast_2d(np.asarray(n, dtype=float))
    if n.shape[1] != len(table.rates):
        raise InputError(f"count strata ({n.shape[1]}) do not match table strata ({len(table.rates)})")
    return n @ table.rates


def unit_counts(records: pd.DataFrame, unit_ids: Sequence[str], table: StratumTable | None = None,
                strata: Strata = Strata()) -> UnitCounts:
    """Observed and indirectly standardized expected deaths per unit.

    Rates default to the internal (whole-population) rates of ``records``.
    """
    if table is None:
        table = stratum_rates(records, strata)
    n, deaths = unit_stratum_counts(records, unit_ids, table.strata)
    return UnitCounts(tuple(unit_ids), n, deaths, expected_deaths(n, table))


def hcfr(records: pd.DataFrame, by: str = "overall", strata: Strata = Strata(),
         unit_ids: Sequence[str] | None = None) -> pd.DataFrame:
    """Deaths / hospitalizations per group. Empty groups get NaN and ``empty=True``."""
    if by == "overall":
        keys = pd.Series(["overall"] * len(records), dtype=object)
        groups = ["overall"]
    elif by == "sex":
        keys = records["sex"]
        groups = list(strata.sexes)
    elif by in ("age", "age_band"):
        labels = strata.band_labels
        keys = pd.Series([labels[i] for i in strata.band_index(records["age"].to_numpy())], dtype=object)
        groups = labels
    elif by == "unit":
        keys = records["unit_id"]
        groups = list(unit_ids) if unit_ids is not None else sorted(set(records["unit_id"]))
    else:
        raise InputError(f"unknown grouping {by!r}")
    keys = keys.reset_index(drop=True)
    death = records["death"].reset_index(drop=True)
    hosp = keys.value_counts().reindex(groups, fill_value=0)
    dead = death.groupby(keys).sum().reindex(groups, fill_value=0)
    rate = dead / hosp.where(hosp > 0)
    return pd.DataFrame({"group": groups, "hosp": hosp.to_numpy(), "deaths": dead.to_numpy().astype(np.int64),
                         "hcfr": rate.to_numpy(dtype=float), "empty": (hosp == 0).to_numpy()})


def unit_aggregate_covariates(records: pd.DataFrame, unit_ids: Sequence[str] | None = None) -> pd.DataFrame:
    """Share of each unit's patients with >= 1 listed risk factor, and with private care."""
    any_rf = records[list(RISK_FACTORS)].any(axis=1)
    frame = pd.DataFrame({"unit_id": records["unit_id"], "rf": any_rf, "pc": records["private_care"]})
    g = frame.groupby("unit_id", sort=False)
    out = pd.DataFrame({"risk_factor_rate": g["rf"].mean(), "private_care_rate": g["pc"].mean()})
    if unit_ids is not None:
        out = out.reindex(list(unit_ids))
    out.index.name = "unit_id"
    return out
