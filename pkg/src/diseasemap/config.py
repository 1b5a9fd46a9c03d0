"""Run configuration: one INI file (sections of key = value), overridable from the command line."""

from __future__ import annotations

import configparser
import datetime as dt
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .bym import PriorSettings
from .cohort import ColumnMap, Strata
from .errors import InputError
from .inference import GridConfig
from .mcmc import ChainConfig
from .simulate import SimulationConfig

DEFAULT_WINDOW = (dt.date(2020, 2, 27), dt.date(2020, 11, 19))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.replace("\n", ",").split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    base_dir: Path
    geometry: Path
    linelist: Path
    covariates: Path
    output: Path
    overlay: Path | None = None
    id_property: str = "id"
    snap: float = 1e-9
    columns: ColumnMap = ColumnMap()
    window: tuple[dt.date, dt.date] = DEFAULT_WINDOW
    strata: Strata = Strata()
    covariate_columns: tuple[str, ...] = ()
    weight_column: str | None = "population"
    skew_threshold: float = 1.0
    collinearity_threshold: float = 0.7
    top_k: int = 4
    model_covariates: tuple[str, ...] = ("screened",)
    include_spatial: bool = True
    include_unstructured: bool = True
    priors: PriorSettings = PriorSettings()
    engine: str = "laplace"
    grid: GridConfig = GridConfig()
    chains: ChainConfig = ChainConfig()
    map_classes: int = 5
    simulation: SimulationConfig = SimulationConfig()
    seed: int = 1
    text: str = field(default="", repr=False)

    def __post_init__(self):
        if self.window[0] > self.window[1]:
            raise InputError(f"study window start {self.window[0]} is after its end {self.window[1]}")
        if self.engine not in ("laplace", "mcmc"):
            raise InputError(f"unknown engine {self.engine!r}")
        if self.map_classes < 1:
            raise InputError("map classes must be >= 1")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str, base_dir: Path | str = ".", overrides: Sequence[str] = ()) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise InputError(f"malformed config: {exc}") from None
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise InputError(f"override must look like section.key=value, got {item!r}")
            key, value = item.split("=", 1)
            section, option = key.strip().split(".", 1)
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, option, value.strip())
        canonical = _canonical(cp)
        return cls._build(cp, Path(base_dir), canonical)

    @classmethod
    def from_file(cls, path, overrides: Sequence[str] = ()) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), p.parent, overrides)

    @classmethod
    def _build(cls, cp: configparser.ConfigParser, base: Path, canonical: str) -> "RunConfig":
        def get(section, key, default=None):
            if cp.has_option(section, key):
                return cp.get(section, key)
            return default

        def path(key, default):
            raw = get("paths", key, default)
            if raw is None or raw == "":
                return None
            p = Path(raw)
            return p if p.is_absolute() else base / p

        try:
            start = dt.date.fromisoformat(get("study", "start", DEFAULT_WINDOW[0].isoformat()))
            end = dt.date.fromisoformat(get("study", "end", DEFAULT_WINDOW[1].isoformat()))
        except ValueError as exc:
            raise InputError(f"bad study date: {exc}") from None
        cols = {k: v for k, v in cp.items("columns")} if cp.has_section("columns") else {}
        unknown = set(cols) - set(ColumnMap.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown column mappings {sorted(unknown)}")
        if "risk_factors" in cols:
            cols["risk_factors"] = _names(cols["risk_factors"])
        try:
            edges = tuple(int(e) for e in _floats(get("study", "age_edges", "0, 20, 40, 60")))
            sexes = _names(get("study", "sexes", "male, female"))
            d_pr, d_gr, d_ch, d_sim = PriorSettings(), GridConfig(), ChainConfig(), SimulationConfig()
            priors = PriorSettings(
                float(get("model", "fixed_precision", d_pr.fixed_precision)),
                float(get("model", "sigma_u", d_pr.sigma_u)), float(get("model", "sigma_alpha", d_pr.sigma_alpha)),
                float(get("model", "phi_u", d_pr.phi_u)), float(get("model", "phi_alpha", d_pr.phi_alpha)))
            grid = GridConfig(int(get("grid", "points", d_gr.points)),
                              float(get("grid", "half_width", d_gr.half_width)),
                              int(get("grid", "max_newton", d_gr.max_newton)),
                              float(get("grid", "grad_tol", d_gr.grad_tol)))
            seed = int(get("run", "seed", 1))
            chains = ChainConfig(int(get("mcmc", "chains", d_ch.chains)), int(get("mcmc", "burn_in", d_ch.burn_in)),
                                 int(get("mcmc", "iterations", d_ch.iterations)), int(get("mcmc", "thin", d_ch.thin)),
                                 int(get("mcmc", "seed", seed)))
            ppu = tuple(int(x) for x in _floats(get("simulate", "patients_per_unit", "60, 180")))
            sim = SimulationConfig(get("simulate", "mode", d_sim.mode), int(get("simulate", "rows", d_sim.rows)),
                                   int(get("simulate", "cols", d_sim.cols)), int(get("simulate", "seed", seed)),
                                   float(get("simulate", "beta_income", d_sim.beta_income)),
                                   float(get("simulate", "tau_b", d_sim.tau_b)), float(get("simulate", "phi", d_sim.phi)),
                                   ppu, int(get("simulate", "zero_units", d_sim.zero_units)))
            weight = get("covariates", "weight", "population")
            return cls(
                base_dir=base,
                geometry=path("geometry", "units.geojson"), linelist=path("linelist", "linelist.csv"),
                covariates=path("covariates", "covariates.csv"), output=path("output", "output"),
                overlay=path("overlay", None),
                id_property=get("geometry", "id_property", "id"), snap=float(get("geometry", "snap", 1e-9)),
                columns=ColumnMap(**cols), window=(start, end), strata=Strata(edges, sexes),
                covariate_columns=_names(get("covariates", "columns", "")),
                weight_column=weight or None,
                skew_threshold=float(get("covariates", "skew_threshold", 1.0)),
                collinearity_threshold=float(get("covariates", "collinearity_threshold", 0.7)),
                top_k=int(get("covariates", "top_k", 4)),
                model_covariates=_names(get("model", "covariates", "screened")),
                include_spatial=_bool(get("model", "spatial", "true")),
                include_unstructured=_bool(get("model", "unstructured", "true")),
                priors=priors, engine=get("model", "engine", "laplace"), grid=grid, chains=chains,
                map_classes=int(get("map", "classes", 5)), simulation=sim, seed=seed, text=canonical)
        except ValueError as exc:
            raise InputError(f"bad config value: {exc}") from None


def _canonical(cp: configparser.ConfigParser) -> str:
    """Sorted section/key rendering, so the hash ignores comments and ordering."""
    lines = []
    for section in sorted(cp.sections()):
        lines.append(f"[{section}]")
        for k, v in sorted(cp.items(section)):
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
