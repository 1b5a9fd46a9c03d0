"""Command-line pipeline: simulate, adjacency, standardize, screen, fit, report.

Every stage reads the run config plus files written by earlier stages, writes into its own
subdirectory of the output directory and records checksums and timings in manifest.json.
Exit codes: 0 success, 1 input error, 2 numerical failure, 3 convergence flag.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .bym import ModelSpec, icar_structure
from .cohort import hcfr, stratum_rates, unit_aggregate_covariates, unit_counts, validate_records
from .config import RunConfig
from .covariates import kaiser_select, merge_covariates, pca, pca_report, prepare_covariates
from .errors import ConvergenceError, DiseaseMapError, InputError
from .geounits import (
    MergeMap,
    build_queen_adjacency,
    edge_list_csv,
    gal_text,
    load_units_file,
    merge_zero_case_units,
    merged_units,
    read_gal,
)
from .fixtures import units_geojson
from .inference import laplace_fit, load_fit, predicted_rr, save_fit
from .maps import choropleth_svg, classify, quantile_breaks, rr_geojson
from .mcmc import mcmc_fit
from .selection import dic, screen_bivariate
from .simulate import simulate_study

log = logging.getLogger("diseasemap")
FLOAT = "%.6f"


# -- helpers ------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _csv(frame: pd.DataFrame, path: Path) -> Path:
    return _write(path, frame.to_csv(index=False, float_format=FLOAT, lineterminator="\n"))


def _require(path: Path | None, what: str) -> Path:
    if path is None or not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    return Path(path)


class Stage:
    """Collects inputs/outputs of one stage and records them in the manifest."""

    def __init__(self, name: str, cfg: RunConfig, seed: int | None = None):
        self.name, self.cfg, self.seed = name, cfg, seed
        self.dir = cfg.output / name
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()

    def input(self, path: Path, what: str) -> Path:
        p = _require(path, what)
        self.inputs.append(p)
        return p

    def output(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def finish(self, extra: dict | None = None):
        cfg = self.cfg
        mpath = cfg.output / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.is_file() else {}
        manifest.update({"artifact_version": __version__, "config_hash": cfg.config_hash})
        entry = {
            "inputs": {str(p): _sha256(p) for p in self.inputs},
            "outputs": {str(p): _sha256(p) for p in sorted(set(self.outputs))},
            "seconds": round(time.perf_counter() - self.t0, 3),
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        }
        if self.seed is not None:
            entry["seed"] = self.seed
        if extra:
            entry.update(extra)
        manifest.setdefault("stages", {})[self.name] = entry
        _write(mpath, json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _records(cfg: RunConfig, stage: Stage, known=None):
    path = stage.input(cfg.linelist, "line list")
    df, report = validate_records(path, cfg.columns, cfg.window, known)
    return df, report


def _merge_map(cfg: RunConfig, stage: Stage) -> MergeMap:
    p = stage.input(cfg.output / "adjacency" / "merge_map.csv", "merge map (run the adjacency command first)")
    return MergeMap.from_csv(p.read_text())


def _unit_frame(cfg: RunConfig, stage: Stage) -> pd.DataFrame:
    p = stage.input(cfg.output / "standardize" / "unit_counts.csv", "unit counts (run standardize first)")
    return pd.read_csv(p, dtype={"unit_id": str})


def _structure(cfg: RunConfig, stage: Stage, ids):
    p = stage.input(cfg.output / "adjacency" / "graph.gal", "GAL file (run adjacency first)")
    graph = read_gal(p.read_text())
    if tuple(graph.ids) != tuple(ids):
        raise InputError("GAL unit order does not match unit counts")
    return icar_structure(graph) if cfg.include_spatial else None


def _design_frame(cfg: RunConfig, stage: Stage, mm: MergeMap, ids) -> pd.DataFrame:
    """Area covariates recombined over merged units plus record-derived unit rates."""
    p = stage.input(cfg.covariates, "covariate file")
    raw = pd.read_csv(p, dtype={"unit_id": str})
    merged = merge_covariates(raw, mm.assignments, cfg.weight_column)
    rec_p = stage.input(cfg.output / "standardize" / "record_covariates.csv", "record covariates")
    rec = pd.read_csv(rec_p, dtype={"unit_id": str})
    frame = merged.merge(rec, on="unit_id", how="left").set_index("unit_id").reindex(list(ids))
    if frame.isna().any().any():
        bad = frame.columns[frame.isna().any()].tolist()
        raise InputError(f"covariates missing for some units in columns {bad}")
    return frame.reset_index()


def _candidate_columns(cfg: RunConfig, frame: pd.DataFrame) -> list[str]:
    if cfg.covariate_columns:
        missing = [c for c in cfg.covariate_columns if c not in frame.columns]
        if missing:
            raise InputError(f"configured covariates not found: {missing}")
        return list(cfg.covariate_columns)
    return [c for c in frame.columns if c not in ("unit_id", cfg.weight_column)]


def _template(cfg: RunConfig, units: pd.DataFrame) -> ModelSpec:
    return ModelSpec.intercept_only(units["expected"].to_numpy(float), include_spatial=cfg.include_spatial,
                                    include_unstructured=cfg.include_unstructured, priors=cfg.priors)


# -- commands ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    stage = Stage("simulate", cfg, seed=cfg.simulation.seed)
    study = simulate_study(cfg.simulation)
    stage.output(_write(cfg.geometry, units_geojson(study.units)))
    stage.output(_write(cfg.linelist, study.records.to_csv(index=False, lineterminator="\n")))
    stage.output(_write(cfg.covariates, study.covariates.to_csv(index=False, float_format=FLOAT,
                                                                lineterminator="\n")))
    stage.output(_write(stage.dir / "truth.json", json.dumps(study.truth, indent=1, sort_keys=True) + "\n"))
    print(f"simulated {len(study.units)} units, {len(study.records)} line-list rows ({cfg.simulation.mode} mode)")
    stage.finish()
    return 0


def cmd_adjacency(cfg: RunConfig) -> int:
    stage = Stage("adjacency", cfg)
    units = load_units_file(stage.input(cfg.geometry, "geometry file"), cfg.id_property)
    ids = [u.id for u in units]
    records, report = _records(cfg, stage, known=set(ids))
    counts = records["unit_id"].value_counts().reindex(ids, fill_value=0).to_numpy()
    graph = build_queen_adjacency(units, cfg.snap)
    mm, merged_graph = merge_zero_case_units(units, graph, counts)
    if sum(counts) != sum(mm.aggregate(dict(zip(ids, counts.tolist()))).values()):
        raise InputError("case totals not conserved by merging")
    stage.output(_write(stage.dir / "edges.csv", edge_list_csv(merged_graph)))
    stage.output(_write(stage.dir / "graph.gal", gal_text(merged_graph)))
    stage.output(_write(stage.dir / "merge_map.csv", mm.to_csv()))
    stage.output(_write(stage.dir / "merged_units.geojson", units_geojson(merged_units(units, mm))))
    n_zero = int((counts == 0).sum())
    print(f"{len(units)} units, {n_zero} without cases, {mm.surviving_count} after merging; "
          f"{len(merged_graph.edges())} queen edges")
    stage.finish({"units": len(units), "zero_case": n_zero, "surviving": mm.surviving_count})
    return 0


def cmd_standardize(cfg: RunConfig) -> int:
    stage = Stage("standardize", cfg)
    mm = _merge_map(cfg, stage)
    records, report = _records(cfg, stage, known=set(mm.assignments))
    records = records.assign(unit_id=records["unit_id"].map(mm.assignments))
    ids = list(mm.surviving_ids)
    table = stratum_rates(records, cfg.strata)
    uc = unit_counts(records, ids, table)
    stage.output(_csv(uc.to_frame(), stage.dir / "unit_counts.csv"))
    stage.output(_csv(table.to_frame(), stage.dir / "stratum_rates.csv"))
    parts = []
    for by in ("overall", "sex", "age"):
        h = hcfr(records, by, cfg.strata)
        h.insert(0, "by", by)
        parts.append(h)
    hc = pd.concat(parts, ignore_index=True)
    stage.output(_csv(hc, stage.dir / "hcfr.csv"))
    stage.output(_csv(report.to_frame(), stage.dir / "rejections.csv"))
    rc = unit_aggregate_covariates(records, ids).reset_index()
    stage.output(_csv(rc, stage.dir / "record_covariates.csv"))
    total_o, total_e = float(uc.observed.sum()), float(uc.expected.sum())
    print(f"{len(records)} records accepted, {report.total} rejected; {int(total_o)} deaths")
    for _, r in hc.iterrows():
        print(f"  HCFR {r['by']:>7} {r['group']:>8}: {100 * r['hcfr']:.2f}%  ({r['deaths']}/{r['hosp']})")
    print(f"conservation: sum E = {total_e:.6f}, sum O = {total_o:.0f}, "
          f"relative error {abs(total_e - total_o) / max(total_o, 1):.2e}")
    stage.finish({"records": len(records), "rejected": report.total, "deaths": int(total_o)})
    return 0


def cmd_screen(cfg: RunConfig) -> int:
    stage = Stage("screen", cfg)
    mm = _merge_map(cfg, stage)
    units = _unit_frame(cfg, stage)
    ids = units["unit_id"].tolist()
    frame = _design_frame(cfg, stage, mm, ids)
    cols = _candidate_columns(cfg, frame)
    matrix = prepare_covariates(frame, cols, cfg.skew_threshold)
    result = pca(matrix)
    groups = kaiser_select(result, cfg.top_k)
    stage.output(_csv(pca_report(result), stage.dir / "pca.csv"))
    cand = pd.DataFrame([{"component": g.component + 1, "eigenvalue": g.eigenvalue, "covariate": c, "loading": l}
                         for g in groups for c, l in zip(g.covariates, g.loadings)],
                        columns=["component", "eigenvalue", "covariate", "loading"])
    stage.output(_csv(cand, stage.dir / "candidates.csv"))
    if not groups:
        raise InputError("no principal component with eigenvalue > 1; nothing to screen")
    y = units["deaths"].to_numpy(float)
    structure = _structure(cfg, stage, ids)
    report = screen_bivariate(matrix, groups, _template(cfg, units), structure, y, cfg.grid,
                              collinearity_threshold=cfg.collinearity_threshold)
    stage.output(_write(stage.dir / "screening.csv", report.to_csv(float_format=FLOAT)))
    stage.output(_write(stage.dir / "screening.txt", report.summary_text()))
    stage.output(_write(stage.dir / "retained.csv", "covariate\n" + "".join(f"{c}\n" for c in
                                                                             report.retained_covariates)))
    print(report.summary_text(), end="")
    stage.finish({"retained": report.retained_covariates})
    return 0


def _model_covariates(cfg: RunConfig, stage: Stage) -> list[str]:
    if list(cfg.model_covariates) == ["screened"]:
        p = stage.input(cfg.output / "screen" / "retained.csv", "screening result (run screen or list covariates)")
        return pd.read_csv(p)["covariate"].astype(str).tolist()
    if list(cfg.model_covariates) in (["none"], []):
        return []
    return list(cfg.model_covariates)


def _write_fit_outputs(fit, units_geo, overlay, classes: int, stage: Stage, outdir: Path):
    stage.output(_csv(fit.relative_risks(), outdir / "summary.csv"))
    stage.output(_csv(fit.fixed_summary(), outdir / "fixed_effects.csv"))
    stage.output(_csv(fit.hyper_summary(), outdir / "hyperparameters.csv"))
    est = predicted_rr(fit).to_frame()
    breaks = quantile_breaks(est["RR"], classes)
    est["map_class"] = classify(est["RR"], breaks)
    stage.output(_csv(est, outdir / "areas.csv"))
    by_id = {u.id: u for u in units_geo}
    ordered = [by_id[u] for u in est["unit_id"]]
    stage.output(_write(outdir / "rr.geojson", rr_geojson(ordered, est)))
    svg = choropleth_svg(ordered, est["RR"].to_numpy(), est["map_class"].to_numpy(), breaks,
                         "Posterior mean relative risk", overlay)
    stage.output(_write(outdir / "rr_map.svg", svg))
    d = dic(fit)
    return {"DIC": d.dic, "pD": d.pd, "Dbar": d.dbar, "D_hat": d.d_hat}


def _overlay(cfg: RunConfig, stage: Stage):
    if cfg.overlay is None:
        return []
    return load_units_file(stage.input(cfg.overlay, "overlay file"), cfg.id_property)


def cmd_fit(cfg: RunConfig) -> int:
    stage = Stage("fit", cfg, seed=cfg.chains.seed if cfg.engine == "mcmc" else None)
    mm = _merge_map(cfg, stage)
    units = _unit_frame(cfg, stage)
    ids = units["unit_id"].tolist()
    names = _model_covariates(cfg, stage)
    if names:
        frame = _design_frame(cfg, stage, mm, ids)
        X = prepare_covariates(frame, names, cfg.skew_threshold).values
    else:
        X = np.zeros((len(ids), 0))
    spec = ModelSpec(X, units["expected"].to_numpy(float), tuple(names), cfg.include_spatial,
                     cfg.include_unstructured, cfg.priors)
    y = units["deaths"].to_numpy(float)
    structure = _structure(cfg, stage, ids)
    if cfg.engine == "mcmc":
        fit = mcmc_fit(spec, structure, y, cfg.chains, ids)
    else:
        fit = laplace_fit(spec, structure, y, cfg.grid, ids)
    geo = load_units_file(stage.input(cfg.output / "adjacency" / "merged_units.geojson", "merged geometry"))
    dic_info = _write_fit_outputs(fit, geo, _overlay(cfg, stage), cfg.map_classes, stage, stage.dir)
    fit.diagnostics["dic"] = dic_info
    for p in save_fit(fit, stage.dir / "fit_state"):
        stage.output(p)
    stage.output(_write(stage.dir / "diagnostics.json",
                        json.dumps({"engine": fit.engine, "converged": fit.converged, **fit.diagnostics,
                                    "grid": fit.grid}, indent=1, sort_keys=True, default=str) + "\n"))
    print(fit.relative_risks().to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    print(f"DIC {dic_info['DIC']:.2f} (pD {dic_info['pD']:.2f}); engine {fit.engine}")
    stage.finish({"engine": fit.engine, "converged": fit.converged})
    if not fit.converged:
        raise ConvergenceError("fit flagged as unconverged; see diagnostics.json")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    stage = Stage("report", cfg)
    fit_dir = cfg.output / "fit" / "fit_state"
    stage.input(fit_dir / "fit.json", "saved fit (run fit first)")
    fit = load_fit(fit_dir)
    geo = load_units_file(stage.input(cfg.output / "adjacency" / "merged_units.geojson", "merged geometry"))
    info = _write_fit_outputs(fit, geo, _overlay(cfg, stage), cfg.map_classes, stage, stage.dir)
    print(f"report written to {stage.dir} (DIC {info['DIC']:.2f})")
    stage.finish()
    return 0


COMMANDS = {"simulate": cmd_simulate, "adjacency": cmd_adjacency, "standardize": cmd_standardize,
            "screen": cmd_screen, "fit": cmd_fit, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diseasemap", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True, help="run configuration (INI)")
        p.add_argument("-o", "--output", help="output directory (overrides paths.output)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--engine", choices=("laplace", "mcmc"), help="overrides model.engine")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config entry; repeatable")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.set)
    if args.output:
        overrides.append(f"paths.output={Path(args.output).resolve()}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.engine:
        overrides.append(f"model.engine={args.engine}")
    threads = os.environ.get("DISEASEMAP_THREADS")
    try:
        cfg = RunConfig.from_file(args.config, overrides)
        if threads:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(int(threads))
        else:
            limiter = nullcontext()
        with limiter:
            return COMMANDS[args.command](cfg)
    except DiseaseMapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
