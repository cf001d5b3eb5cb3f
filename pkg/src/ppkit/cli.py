"""ppkit command line: diagnose | simulate | fit | report.

Every command reads one JSON config, writes into an output directory, copies the
config there, and exits 0 only when all outputs were written. Failures print a
JSON error document on stderr (and into ``error.json`` when the output directory
is known) and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import svg
from .covar import (CovariateStack, EventTable, aggregate, coordinate_layers, disaggregate, distance_layer,
                    filter_events, interaction_layer, jitter, deduplicate, load_cities, load_events,
                    pattern_table, raster_layer, read_ascii_grid, restrict_mask, specificity_predicate,
                    standardize, write_ascii_grid, write_events)
from .fit import (McmcConfig, ModelFrame, PosteriorSamples, fit_bivariate, fit_univariate,
                  fitted_cross_k, intensity_ratio_map, posterior_correlation_curves, _mcm, _prepare)
from .geom import GridSpec, Projection, Window, load_window
from .kernel import IntensityField
from .grf import ExpCovParams, LmcParams
from .ripley import KResult, cross_diagnose, cross_k_inhom, default_radii, diagnose
from .sim import LgcpModel, scatter, simulate_bivariate_lgcp, simulate_lgcp


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config schema

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WindowCfg(_Strict):
    geojson: Optional[str] = None
    planar: bool = False
    box: Optional[Tuple[float, float, float, float]] = None

    @model_validator(mode="after")
    def _one(self):
        if (self.geojson is None) == (self.box is None):
            raise ValueError("window needs exactly one of 'geojson' or 'box'")
        if self.box is not None and not (self.box[2] > self.box[0] and self.box[3] > self.box[1]):
            raise ValueError("window.box must be [xmin, ymin, xmax, ymax] with positive extent")
        return self


class GridCfg(_Strict):
    nx: Optional[int] = Field(None, ge=2)
    ny: Optional[int] = Field(None, ge=2)
    cell_size: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _one(self):
        if (self.nx is None) == (self.cell_size is None):
            raise ValueError("grid needs either 'nx' (and optional 'ny') or 'cell_size'")
        return self


class RasterCfg(_Strict):
    name: str
    path: str
    log: bool = False


class CovariatesCfg(_Strict):
    rasters: List[RasterCfg] = []
    cities: Optional[str] = None
    coords: bool = False
    interactions: List[Tuple[str, str]] = []
    coarse_factor: Optional[int] = Field(None, ge=2)


class SpecificityCfg(_Strict):
    op: Literal["eq", "ne", "lt", "le", "gt", "ge"]
    value: int


class KCfg(_Strict):
    n_radii: int = Field(64, ge=2)
    r_max: Optional[float] = Field(None, gt=0)
    n_sim: int = Field(99, ge=2)
    level: float = Field(0.95, gt=0, lt=1)
    estimator: Literal["kernel", "homogeneous"] = "kernel"
    bandwidth: Optional[float] = Field(None, gt=0)


class McmcCfg(_Strict):
    preset: Literal["full", "desk", "smoke"] = "desk"
    overrides: Dict[str, float] = {}
    sign: Literal[-1, 1] = -1


class ExpCfg(_Strict):
    sigma: float = Field(ge=0)
    phi: float = Field(gt=0)


class ModelCfg(_Strict):
    beta: List[float] = [0.0]
    beta2: Optional[List[float]] = None
    sigma: Optional[float] = Field(None, ge=0)
    phi: Optional[float] = Field(None, gt=0)
    w1: Optional[ExpCfg] = None
    w2: Optional[ExpCfg] = None
    w: Optional[ExpCfg] = None
    sign: Literal[-1, 1] = -1
    lattice: List[ExpCfg] = []

    @model_validator(mode="after")
    def _kind(self):
        lmc = [self.w1, self.w2, self.w]
        if any(x is not None for x in lmc):
            if any(x is None for x in lmc) or self.beta2 is None:
                raise ValueError("bivariate model needs w1, w2, w and beta2")
        elif not self.lattice and (self.sigma is None or self.phi is None):
            raise ValueError("model needs sigma and phi, a lattice, or w1/w2/w for a bivariate model")
        return self

    @property
    def bivariate(self) -> bool:
        return self.w is not None


class ReportCfg(_Strict):
    posteriors: Dict[str, str] = {}
    compare: List[Tuple[str, str]] = []
    process: int = Field(0, ge=0, le=1)
    n_sim: int = Field(200, ge=2)
    n_radii: int = Field(50, ge=2)
    r_max: Optional[float] = Field(None, gt=0)


class RunConfig(_Strict):
    window: WindowCfg
    grid: GridCfg
    events: Optional[str] = None
    groups: List[str] = []
    specificity: Optional[SpecificityCfg] = None
    duplicates: Literal["jitter", "dedup", "keep"] = "jitter"
    jitter_sd: float = Field(1e-6, gt=0)
    covariates: CovariatesCfg = CovariatesCfg()
    k: KCfg = KCfg()
    mcmc: McmcCfg = McmcCfg()
    model: Optional[ModelCfg] = None
    report: ReportCfg = ReportCfg()
    seed: Optional[int] = None
    out: Optional[str] = None

    @field_validator("groups")
    @classmethod
    def _groups(cls, v):
        if len(v) > 2:
            raise ValueError("at most two groups are supported")
        if len(set(v)) != len(v):
            raise ValueError("groups must be distinct")
        return v

    def paths(self) -> list[str]:
        out = [self.events, self.window.geojson, self.covariates.cities]
        out += [r.path for r in self.covariates.rasters]
        out += list(self.report.posteriors.values())
        return [p for p in out if p is not None]


def load_config(path, base: Optional[Path] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        msgs = [f"{'.'.join(str(x) for x in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        raise ConfigError(f"{path}: " + "; ".join(msgs)) from None
    base = base or path.parent
    cfg = _resolve_paths(cfg, base)
    missing = [p for p in cfg.paths() if not Path(p).exists()]
    if missing:
        raise ConfigError(f"referenced paths do not exist: {missing}")
    return cfg


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p):
        return None if p is None else str(p if os.path.isabs(p) else base / p)

    d = cfg.model_dump()
    d["events"] = fix(d["events"])
    d["window"]["geojson"] = fix(d["window"]["geojson"])
    d["covariates"]["cities"] = fix(d["covariates"]["cities"])
    for r in d["covariates"]["rasters"]:
        r["path"] = fix(r["path"])
    d["report"]["posteriors"] = {k: fix(v) for k, v in d["report"]["posteriors"].items()}
    return RunConfig.model_validate(d)


# ---------------------------------------------------------------- shared pipeline pieces

def _window(cfg: RunConfig) -> tuple[Window, Projection]:
    if cfg.window.box is not None:
        return Window.box(*cfg.window.box), Projection(planar=True)
    return load_window(cfg.window.geojson, planar=cfg.window.planar)


def _grid(cfg: RunConfig, window: Window) -> GridSpec:
    if cfg.grid.cell_size is not None:
        return GridSpec.with_cell_size(window, cfg.grid.cell_size)
    return GridSpec.for_window(window, cfg.grid.nx, cfg.grid.ny)


def _need_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise ConfigError("a seed is required for this command (config 'seed' or --seed)")
    return cfg.seed


def _patterns(cfg: RunConfig, window, projection, seed_seq) -> dict:
    """Per-group point patterns, filtered and made simple per the duplicates policy."""
    if cfg.events is None:
        raise ConfigError("this command needs an 'events' CSV")
    table, dropped = load_events(cfg.events, window, projection)
    pred = None if cfg.specificity is None else specificity_predicate(cfg.specificity.op, cfg.specificity.value)
    groups = cfg.groups or [None]
    seeds = seed_seq.spawn(len(groups))
    out = {}
    for g, s in zip(groups, seeds):
        t = filter_events(table, g, pred)
        pp = t.to_pattern(window, projection)
        if cfg.duplicates == "jitter":
            pp = jitter(pp, cfg.jitter_sd, np.random.default_rng(s), projection)
        elif cfg.duplicates == "dedup":
            pp, _ = deduplicate(pp)
        else:
            pp.require_simple()
        out[g if g is not None else "all"] = pp
    return out


def _covariates(cfg: RunConfig, grid: GridSpec, projection: Projection) -> Optional[CovariateStack]:
    c = cfg.covariates
    layers, logs = {}, set()
    for r in c.rasters:
        layers[r.name] = raster_layer(read_ascii_grid(r.path), grid, projection, r.log)
        if r.log:
            logs.add(r.name)
    if c.cities:
        layers["dist_city"] = distance_layer(grid, load_cities(c.cities, projection))
    if c.coords:
        layers.update(coordinate_layers(grid))
    if not layers:
        return None
    stack = restrict_mask(CovariateStack(grid, layers, {}, frozenset(logs)))
    stack = standardize(stack)
    if c.coarse_factor:
        f = c.coarse_factor
        g = stack.grid
        coarse = GridSpec(g.x0, g.y0, g.dx * f, g.dy * f, -(-g.nx // f), -(-g.ny // f))
        stack = disaggregate(aggregate(stack, coarse), g)
        stack = CovariateStack(g, stack.layers, stack.standardization, stack.log_layers)
        stack = standardize(restrict_mask(stack))
    for a, b in c.interactions:
        stack = interaction_layer(stack, a, b)
    return stack


def _radii(window: Window, n: int, r_max: Optional[float]) -> np.ndarray:
    if r_max is None:
        return default_radii(window, n)
    return np.linspace(0.0, r_max, n)


def _dump_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_config(out: Path, cfg: RunConfig, command: str):
    _dump_json(out / "config.json", {"command": command, **cfg.model_dump(mode="json")})


def _verdict(res: KResult, kind: str) -> dict:
    dep = res.departure()
    below, above = int((dep < 0).sum()), int((dep > 0).sum())
    if below > above:
        pattern = "repulsion"
    elif above > 0:
        pattern = "clustering"
    else:
        pattern = "none"
    doc = {"kind": kind, "radii_above_envelope": above, "radii_below_envelope": below,
           "departure": pattern, "n_sim": res.n_sim, "level": res.level}
    if res.p_value is not None:
        doc["statistic"] = res.statistic
        doc["p_value"] = res.p_value
        doc["csr"] = "reject CSR" if res.p_value <= 0.05 else "fail to reject CSR"
    return doc


# ---------------------------------------------------------------- commands

def cmd_diagnose(cfg: RunConfig, out: Path) -> dict:
    seed = _need_seed(cfg)
    window, proj = _window(cfg)
    grid = _grid(cfg, window)
    s_data, s_env = np.random.SeedSequence(seed).spawn(2)
    pats = _patterns(cfg, window, proj, s_data)
    radii = _radii(window, cfg.k.n_radii, cfg.k.r_max)
    env_seeds = s_env.spawn(len(pats) + 1)
    report = {}
    for (name, pp), ss in zip(pats.items(), env_seeds):
        res = diagnose(pp, grid, radii, cfg.k.n_sim, cfg.k.level, ss, cfg.k.bandwidth, cfg.k.estimator)
        res.to_csv(out / f"k_{name}.csv")
        (out / f"k_{name}.svg").write_text(svg.envelope_plot(radii, res.khat, res.mean, res.lo, res.hi,
                                                             f"inhomogeneous K: {name}"))
        report[name] = {"n": pp.n, **_verdict(res, "univariate")}
    if len(pats) == 2:
        (a, pa), (b, pb) = pats.items()
        bw = (cfg.k.bandwidth, cfg.k.bandwidth)
        res = cross_diagnose(pa, pb, grid, radii, cfg.k.n_sim, cfg.k.level, env_seeds[-1], bw, cfg.k.estimator)
        res.to_csv(out / "cross_k.csv")
        (out / "cross_k.svg").write_text(svg.envelope_plot(radii, res.khat, res.mean, res.lo, res.hi,
                                                           f"inhomogeneous cross-K: {a} vs {b}"))
        report["cross"] = {"groups": [a, b], **_verdict(res, "cross")}
    _dump_json(out / "diagnose.json", report)
    return report


def _sim_model(cfg: RunConfig, grid: GridSpec, cov: Optional[CovariateStack], sigma=None, phi=None) -> LgcpModel:
    m = cfg.model
    try:
        if m.bivariate:
            p = LmcParams(ExpCovParams(m.w1.sigma, m.w1.phi), ExpCovParams(m.w2.sigma, m.w2.phi),
                          ExpCovParams(m.w.sigma, m.w.phi), m.sign)
            return LgcpModel(np.array([m.beta, m.beta2]), p, grid, cov)
        return LgcpModel(np.array(m.beta), ExpCovParams(sigma if sigma is not None else m.sigma,
                                                        phi if phi is not None else m.phi), grid, cov)
    except ValueError as e:
        raise ConfigError(f"invalid model parameters: {e}") from None


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    seed = _need_seed(cfg)
    if cfg.model is None:
        raise ConfigError("simulate needs a 'model' section")
    window, proj = _window(cfg)
    grid = _grid(cfg, window)
    cov = _covariates(cfg, grid, proj)
    if cov is not None:
        grid = cov.grid
    report = {}
    if cfg.model.lattice:
        panels = []
        for k, (cell, ss) in enumerate(zip(cfg.model.lattice, np.random.SeedSequence(seed).spawn(len(cfg.model.lattice)))):
            m = _sim_model(cfg, grid, cov, cell.sigma, cell.phi)
            pp, e = simulate_lgcp(m, ss, window)
            write_events(out / f"events_{k}.csv", pattern_table(pp, proj, "sim"))
            write_ascii_grid(out / f"field_{k}.asc", grid, e.values)
            panels.append((f"sigma={cell.sigma:g}, phi={cell.phi:g} (n={pp.n})", pp.points))
            report[str(k)] = {"sigma": cell.sigma, "phi": cell.phi, "n": pp.n}
        (out / "panel.svg").write_text(svg.pattern_panel(panels, window))
    elif cfg.model.bivariate:
        m = _sim_model(cfg, grid, cov)
        (p1, p2), (e1, e2, w) = simulate_bivariate_lgcp(m, np.random.SeedSequence(seed), window)
        names = cfg.groups if len(cfg.groups) == 2 else ["1", "2"]
        t1, t2 = pattern_table(p1, proj, names[0]), pattern_table(p2, proj, names[1])
        both = EventTable(np.array([str(i + 1) for i in range(len(t1) + len(t2))], dtype=object),
                          np.concatenate([t1.lon, t2.lon]), np.concatenate([t1.lat, t2.lat]),
                          np.concatenate([t1.group, t2.group]), np.concatenate([t1.specificity, t2.specificity]))
        write_events(out / "events.csv", both)
        write_ascii_grid(out / "field_1.asc", grid, e1.values)
        write_ascii_grid(out / "field_2.asc", grid, e2.values)
        write_ascii_grid(out / "field_common.asc", grid, w.values)
        report = {names[0]: {"n": p1.n}, names[1]: {"n": p2.n}}
    else:
        m = _sim_model(cfg, grid, cov)
        pp, e = simulate_lgcp(m, np.random.SeedSequence(seed), window)
        write_events(out / "events.csv", pattern_table(pp, proj, cfg.groups[0] if cfg.groups else "sim"))
        write_ascii_grid(out / "field.asc", grid, e.values)
        report = {"n": pp.n}
    _dump_json(out / "simulate.json", report)
    return report


def _frame_and_data(cfg: RunConfig, seed: int):
    window, proj = _window(cfg)
    grid = _grid(cfg, window)
    cov = _covariates(cfg, grid, proj)
    frame = ModelFrame.from_covariates(grid, cov)
    pats = _patterns(cfg, window, proj, np.random.SeedSequence(seed).spawn(2)[0])
    return window, proj, cov, frame, pats


def _mcmc_config(cfg: RunConfig, seed: int, bivariate: bool) -> McmcConfig:
    ints = {"burn_in", "thin", "n_samples", "seed"}
    over = {k: (int(v) if k in ints else v) for k, v in cfg.mcmc.overrides.items()}
    try:
        return McmcConfig.preset(cfg.mcmc.preset, bivariate, seed=seed, **over)
    except TypeError as e:
        raise ConfigError(f"mcmc.overrides: {e}") from None


def cmd_fit(cfg: RunConfig, out: Path) -> dict:
    seed = _need_seed(cfg)
    window, proj, cov, frame, pats = _frame_and_data(cfg, seed)
    chain_seed = int(np.random.SeedSequence(seed).spawn(2)[1].generate_state(1)[0])
    names = list(pats)
    counts, betas, _ = _prepare(list(pats.values()), frame)
    moments = [_mcm(pp, frame, b) for pp, b in zip(pats.values(), betas)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if len(pats) == 1:
            mc = _mcmc_config(cfg, chain_seed, False)
            s = fit_univariate(pats[names[0]], cov, mc, grid=frame.grid, moment=moments[0])
        else:
            mc = _mcmc_config(cfg, chain_seed, True)
            s = fit_bivariate(pats[names[0]], pats[names[1]], cov, cfg.mcmc.sign, mc, grid=frame.grid,
                              moments=tuple(moments), names=names)
    s.to_csv(out / "posterior.csv")
    extra = {
        "moment_fits": {n: {"sigma": m.sigma, "phi": m.phi, "contrast": m.contrast,
                            "r_range": list(m.r_range), "exponent": m.exponent, "on_boundary": m.on_boundary}
                        for n, m in zip(names, moments)},
        "counts": {n: int(c.sum()) for n, c in zip(names, counts)},
        "grid": frame.grid.to_dict(),
        "warnings": sorted({str(w.message) for w in caught}),
        "mcmc": {k: v for k, v in mc.__dict__.items()},
    }
    s.to_json(out / "posterior.json", extra)
    if s.latent_mean is not None:
        for k, n in enumerate(s.process_names if s.bivariate else names):
            write_ascii_grid(out / f"latent_mean_{n}.asc", frame.grid, s.latent_mean[k])
            write_ascii_grid(out / f"latent_sd_{n}.asc", frame.grid, s.latent_sd[k])
    return {"summary": s.summary(), "acceptance": s.acceptance}


def _load_fit(path: str):
    d = Path(path)
    for f in ("posterior.csv", "posterior.json", "config.json"):
        if not (d / f).exists():
            raise ConfigError(f"{d}: missing {f}; point report.posteriors at a fit output directory")
    fit_cfg = RunConfig.model_validate({k: v for k, v in json.loads((d / "config.json").read_text()).items()
                                        if k != "command"})
    s = PosteriorSamples.from_files(d / "posterior.csv", d / "posterior.json")
    return fit_cfg, s


def _write_curves(path: Path, curves: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "r", "median", "lo", "hi"])
        for name, c in curves.items():
            for row in zip(c.radii, c.median, c.lo, c.hi):
                w.writerow([name] + [f"{v:.10g}" for v in row])


def cmd_report(cfg: RunConfig, out: Path) -> dict:
    seed = _need_seed(cfg)
    rc = cfg.report
    if not rc.posteriors:
        raise ConfigError("report needs 'report.posteriors' (label -> fit output directory)")
    fits = {label: _load_fit(p) for label, p in rc.posteriors.items()}
    seeds = np.random.SeedSequence(seed).spawn(len(fits) + len(rc.compare))
    report = {}
    frames = {}
    for (label, (fcfg, s)), ss in zip(fits.items(), seeds):
        fseed = _need_seed(fcfg)
        window, proj, cov, frame, pats = _frame_and_data(fcfg, fseed)
        frames[label] = frame
        radii = _radii(window, rc.n_radii, rc.r_max)
        curves = posterior_correlation_curves(s, radii)
        _write_curves(out / f"curves_{label}.csv", curves)
        (out / f"curves_{label}.svg").write_text(svg.curves_plot(curves, f"log-intensity correlation: {label}"))
        entry = {"n_draws": s.n_draws, "curves": {k: {"median_at_0": float(c.median[0])} for k, c in curves.items()}}
        if s.bivariate:
            res = fitted_cross_k(s, frame, rc.n_sim, radii, ss, window)
            p1, p2 = list(pats.values())
            lam = [scatter(frame.grid, np.exp(frame.Z @ np.median(s.beta[:, k], axis=0))) for k in range(2)]
            l1 = IntensityField(frame.grid, lam[0]).at(p1.points)
            l2 = IntensityField(frame.grid, lam[1]).at(p2.points)
            res.khat = cross_k_inhom(p1, p2, l1, l2, radii, window)
            res.to_csv(out / f"fitted_cross_k_{label}.csv")
            (out / f"fitted_cross_k_{label}.svg").write_text(
                svg.envelope_plot(radii, res.khat, res.mean, res.lo, res.hi, f"fitted cross-K: {label}"))
            inside = float(np.mean(res.departure() == 0))
            entry["fitted_cross_k_inside_fraction"] = inside
        report[label] = entry
    for (a, b), ss in zip(rc.compare, seeds[len(fits):]):
        for lab in (a, b):
            if lab not in fits:
                raise ConfigError(f"report.compare refers to unknown posterior label {lab!r}")
        rm = intensity_ratio_map(fits[a][1], fits[b][1], frames[a], frames[b], rc.n_sim, ss, rc.process)
        stem = f"ratio_{a}_vs_{b}"
        write_ascii_grid(out / f"{stem}.asc", rm.grid, rm.median)
        flags = np.where(rm.plus, 1.0, np.where(rm.cross, -1.0, 0.0))
        write_ascii_grid(out / f"{stem}_flags.asc", rm.grid, flags)
        (out / f"{stem}.svg").write_text(svg.ratio_map(rm, f"median intensity ratio {a} / {b}"))
        report[f"{a}_vs_{b}"] = {"plus_cells": int(rm.plus.sum()), "cross_cells": int(rm.cross.sum())}
    _dump_json(out / "report.json", report)
    return report


COMMANDS = {"diagnose": cmd_diagnose, "simulate": cmd_simulate, "fit": cmd_fit, "report": cmd_report}


def _error_doc(e: BaseException) -> dict:
    kind = "config_error" if isinstance(e, ConfigError) else type(e).__name__
    return {"error": kind, "message": str(e)}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ppkit", description="Spatial point-pattern analysis with LGCPs.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--out", default=None, help="output directory (overrides the config)")
    args = ap.parse_args(argv)
    out = None
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        out_s = args.out or cfg.out
        if out_s is None:
            raise ConfigError("no output directory: pass --out or set 'out' in the config")
        if args.out:
            cfg = cfg.model_copy(update={"out": args.out})
        out = Path(out_s)
        out.mkdir(parents=True, exist_ok=True)
        stale = out / "error.json"
        if stale.exists():
            stale.unlink()
        _write_config(out, cfg, args.command)
        result = COMMANDS[args.command](cfg, out)
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error document
        doc = _error_doc(e)
        print(json.dumps(doc), file=sys.stderr)
        if out is not None and out.is_dir():
            _dump_json(out / "error.json", doc)
        return 2
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
