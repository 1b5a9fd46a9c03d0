"""Synthetic studies: geometry, line list and area covariates with a known relative-risk surface.

Two modes:

* ``lattice``: a rows x cols grid; deaths are drawn per patient with probability
  r_s * RR_i, where RR_i = exp(beta * z(income)_i + b_i) and b is a BYM2 draw.
* ``paper``: 1,594 jittered cells (40 x 40 minus 6), 140 of them without hospitalizations,
  and a line list whose age x sex hospitalization and death counts are fixed exactly, so
  the aggregate fatality rates are known in advance. 29 rows with missing age are appended
  and are expected to be rejected by validation.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .bym import icar_structure, sample_icar
from .cohort import RISK_FACTORS, Strata
from .covariates import prepare_covariates
from .fixtures import lattice_units, units_geojson
from .geounits import AreaUnit, build_queen_adjacency

# band-major (0-19 m, 0-19 f, 20-39 m, ...) hospitalizations and deaths
PAPER_HOSP = np.array([900, 850, 3300, 2700, 8159, 5231, 11967, 11041])
PAPER_DEATHS = np.array([40, 39, 274, 157, 1248, 727, 5302, 4383])
PAPER_UNITS = 1594
PAPER_ZERO_UNITS = 140
PAPER_MISSING_AGE = 29
PAPER_DROPPED_CELLS = frozenset({0, 39, 1560, 1599, 820, 781})
STUDY_WINDOW = (dt.date(2020, 2, 27), dt.date(2020, 11, 19))
BAND_AGES = ((0, 19), (20, 39), (40, 59), (60, 99))

COVARIATE_BLOCKS = {
    "income": 0, "education": 0, "sanitation": 0, "water_supply": 0,
    "density": 1, "crowding": 1, "informal_housing": 1, "bus_stops": 1,
}


@dataclass(frozen=True)
class SimulationConfig:
    mode: str = "lattice"
    rows: int = 20
    cols: int = 20
    seed: int = 1
    beta_income: float = math.log(0.91)
    tau_b: float = 25.0
    phi: float = 0.5
    patients_per_unit: tuple[int, int] = (60, 180)
    zero_units: int = 0
    origin: tuple[float, float] = (-46.83, -23.78)
    cell: float = 0.01
    jitter: float = 0.0

    def __post_init__(self):
        if self.mode not in ("lattice", "paper"):
            raise ValueError(f"unknown simulation mode {self.mode!r}")
        if self.rows < 1 or self.cols < 1 or self.patients_per_unit[0] < 1:
            raise ValueError("invalid lattice or patient settings")


@dataclass
class SyntheticStudy:
    units: list[AreaUnit]
    records: pd.DataFrame  # line list as strings, canonical column names
    covariates: pd.DataFrame
    truth: dict = field(default_factory=dict)

    def write(self, outdir) -> dict[str, Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"geometry": out / "units.geojson", "linelist": out / "linelist.csv",
                 "covariates": out / "covariates.csv", "truth": out / "truth.json"}
        paths["geometry"].write_text(units_geojson(self.units))
        self.records.to_csv(paths["linelist"], index=False, lineterminator="\n")
        self.covariates.to_csv(paths["covariates"], index=False, float_format="%.6f", lineterminator="\n")
        paths["truth"].write_text(json.dumps(self.truth, indent=1, sort_keys=True) + "\n")
        return paths


def synthetic_covariates(unit_ids, rng: np.random.Generator) -> pd.DataFrame:
    """Eight positive, right-skewed covariates in two correlated blocks, plus a population column."""
    n = len(unit_ids)
    factors = rng.standard_normal((2, n))
    # unequal block strengths keep the two leading eigenvalues apart, so components are identifiable
    strength = (0.9, 0.6)
    cols = {"unit_id": list(unit_ids)}
    for k, (name, block) in enumerate(COVARIATE_BLOCKS.items()):
        latent = strength[block] * factors[block] + 0.5 * rng.standard_normal(n)
        cols[name] = np.round(np.exp(2.0 + 0.6 * latent + 0.1 * k), 6)
    cols["population"] = np.round(np.exp(rng.normal(8.8, 0.4, n))).astype(int)
    return pd.DataFrame(cols)


def _relative_risk(units, cov: pd.DataFrame, cfg: SimulationConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    z = prepare_covariates(cov, ["income"]).column("income")
    graph = build_queen_adjacency(units)
    structure = icar_structure(graph)
    sigma = 1.0 / math.sqrt(cfg.tau_b)
    u = sample_icar(structure, rng)
    v = rng.standard_normal(len(units))
    b = sigma * (math.sqrt(1 - cfg.phi) * v + math.sqrt(cfg.phi / structure.scaling_factor) * u)
    return np.exp(cfg.beta_income * z + b), b


def _patients(codes: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    strata = Strata()
    band = codes // len(strata.sexes)
    lo = np.array([a for a, _ in BAND_AGES])[band]
    hi = np.array([b for _, b in BAND_AGES])[band]
    ages = rng.integers(lo, hi + 1)
    sexes = np.array(strata.sexes)[codes % len(strata.sexes)]
    return ages, sexes


def _line_list(unit_of: np.ndarray, ages, sexes, death: np.ndarray, rng) -> pd.DataFrame:
    n = len(unit_of)
    span = (STUDY_WINDOW[1] - STUDY_WINDOW[0]).days
    start = np.datetime64(STUDY_WINDOW[0].isoformat())
    hosp = start + rng.integers(0, span + 1, n).astype("timedelta64[D]")
    stay = rng.integers(1, 40, n).astype("timedelta64[D]")
    older = ages >= 60
    df = pd.DataFrame({
        "age": ages.astype(str), "sex": sexes, "unit_id": unit_of,
        "hosp_date": hosp.astype(str), "outcome": np.where(death, "death", "discharge"),
        "outcome_date": (hosp + stay).astype(str),
        "private_care": (rng.random(n) < 0.3).astype(int).astype(str),
    })
    for k, rf in enumerate(RISK_FACTORS):
        p = 0.04 + 0.02 * (k % 4) + 0.15 * older
        df[rf] = (rng.random(n) < p).astype(int).astype(str)
    return df


def simulate_lattice(cfg: SimulationConfig) -> SyntheticStudy:
    rng = np.random.default_rng(cfg.seed)
    units = lattice_units(cfg.rows, cfg.cols, cfg.cell, cfg.origin, cfg.jitter, rng)
    ids = [u.id for u in units]
    cov = synthetic_covariates(ids, rng)
    rr, b = _relative_risk(units, cov, cfg, rng)
    zero = set(rng.choice(len(ids), size=cfg.zero_units, replace=False).tolist()) if cfg.zero_units else set()
    lo, hi = cfg.patients_per_unit
    counts = np.where([k in zero for k in range(len(ids))], 0, rng.integers(lo, hi + 1, len(ids)))
    unit_of = np.repeat(np.array(ids), counts)
    share = PAPER_HOSP / PAPER_HOSP.sum()
    codes = rng.choice(len(share), size=len(unit_of), p=share)
    ages, sexes = _patients(codes, rng)
    base = (PAPER_DEATHS / PAPER_HOSP)[codes]
    p = np.minimum(base * np.repeat(rr, counts), 0.999)
    death = rng.random(len(unit_of)) < p
    records = _line_list(unit_of, ages, sexes, death, rng)
    truth = {"mode": "lattice", "config": asdict(cfg), "beta_income": cfg.beta_income,
             "log_rr": dict(zip(ids, np.log(rr).round(10).tolist())), "zero_units": sorted(ids[k] for k in zero)}
    return SyntheticStudy(units, records, cov, truth)


def simulate_paper(cfg: SimulationConfig) -> SyntheticStudy:
    rng = np.random.default_rng(cfg.seed)
    units = lattice_units(40, 40, cfg.cell, cfg.origin, jitter=0.25, rng=rng, drop=PAPER_DROPPED_CELLS)
    ids = np.array([u.id for u in units])
    cov = synthetic_covariates(ids, rng)
    rr, _ = _relative_risk(units, cov, cfg, rng)
    zero = np.sort(rng.choice(len(ids), size=PAPER_ZERO_UNITS, replace=False))
    positive = np.setdiff1d(np.arange(len(ids)), zero)

    total = int(PAPER_HOSP.sum())
    codes = rng.permutation(np.repeat(np.arange(len(PAPER_HOSP)), PAPER_HOSP))
    weight = cov["population"].to_numpy(float)[positive]
    extra = rng.choice(positive, size=total - len(positive), p=weight / weight.sum())
    unit_idx = rng.permutation(np.concatenate([positive, extra]))

    death = np.zeros(total, dtype=bool)
    for s, d in enumerate(PAPER_DEATHS):
        members = np.flatnonzero(codes == s)
        w = rr[unit_idx[members]]
        death[rng.choice(members, size=int(d), replace=False, p=w / w.sum())] = True

    ages, sexes = _patients(codes, rng)
    records = _line_list(ids[unit_idx], ages, sexes, death, rng)
    bad = records.sample(PAPER_MISSING_AGE, random_state=np.random.RandomState(cfg.seed)).copy()
    bad["age"] = ""
    records = pd.concat([records, bad], ignore_index=True)
    truth = {"mode": "paper", "config": asdict(cfg), "beta_income": cfg.beta_income,
             "records": total, "deaths": int(death.sum()), "rejected_missing_age": PAPER_MISSING_AGE,
             "zero_units": sorted(ids[zero].tolist())}
    return SyntheticStudy(units, records, cov, truth)


def simulate_study(cfg: SimulationConfig) -> SyntheticStudy:
    return simulate_paper(cfg) if cfg.mode == "paper" else simulate_lattice(cfg)


# -- count-level instances (no line list) -----------------------------------------

@dataclass
class CountInstance:
    spec: object  # ModelSpec
    structure: object  # IcarStructure
    y: np.ndarray
    beta0: float
    beta: np.ndarray
    eta: np.ndarray
    unit_ids: tuple[str, ...]


_LATTICE_CACHE: dict = {}


def lattice_structure(rows: int, cols: int):
    """Queen-lattice ICAR structure and unit ids, cached per shape."""
    key = (rows, cols)
    if key not in _LATTICE_CACHE:
        units = lattice_units(rows, cols)
        _LATTICE_CACHE[key] = (icar_structure(build_queen_adjacency(units)), tuple(u.id for u in units))
    return _LATTICE_CACHE[key]


def lattice_instance(rows: int, cols: int, seed: int, beta=(math.log(0.91),), beta0: float = 0.0,
                     expected=(20.0, 50.0), tau_b: float = 25.0, phi: float = 0.5, extra_noise: int = 0,
                     include_spatial: bool = True, include_unstructured: bool = True) -> CountInstance:
    """Poisson BYM2 counts on a queen lattice with standardized N(0,1) covariates.

    ``extra_noise`` appends that many independent covariates with zero effect.
    """
    from .bym import Hyperparams, ModelSpec, simulate_counts

    structure, ids = lattice_structure(rows, cols)
    rng = np.random.default_rng(seed)
    n = rows * cols
    E = rng.uniform(expected[0], expected[1], n)
    p = len(beta) + extra_noise
    X = rng.standard_normal((n, p))
    X = (X - X.mean(axis=0)) / X.std(axis=0, ddof=1)
    names = tuple(f"x{k + 1}" for k in range(len(beta))) + tuple(f"noise{k + 1}" for k in range(extra_noise))
    spec = ModelSpec(X, E, names, include_spatial, include_unstructured)
    full_beta = np.concatenate([np.asarray(beta, dtype=float), np.zeros(extra_noise)])
    y, _, eta = simulate_counts(spec, structure if include_spatial else None, Hyperparams(tau_b, phi), beta0,
                                full_beta, rng, return_state=True)
    return CountInstance(spec, structure if include_spatial else None, y.astype(float), beta0, full_beta, eta, ids)
