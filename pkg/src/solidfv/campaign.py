"""Deterministic run driver and the sampling campaign on top of it.

A run loads its mesh, integrates the coupled solver to the stop
condition, and reduces the fields to scalar functionals through the
microstructure models.  A campaign maps sparse-grid sample points onto
perturbed copies of the run config, executes them (in parallel worker
processes if asked), caches finished samples on disk keyed by node
index so an interrupted campaign resumes where it stopped, and fits a
chaos model per functional with sensitivity tables and response
surfaces derived from the fit.
"""

from __future__ import annotations

import copy
import json
import os
import traceback
from dataclasses import dataclass, field
from math import comb
from multiprocessing import Pool

import numpy as np

from .config import (CampaignConfig, ConfigError, RunConfig,
                     build_run_config, dump_config, set_config_value)
from .discretization import DirichletBC
from .mesh import Mesh, load_msh
from .microstructure import (cooling_rate_field, grain_size_field, sdas,
                             yield_strength)
from .output import (ProbeTraces, nearest_cells, write_functionals,
                     write_probes, write_samples_csv, write_sobol_csv,
                     write_surface_csv, write_vtk)
from .solidify import MaterialModel, Solver
from .uq import (InputDistribution, PceModel, basis_matrix, fit_pce,
                 response_surface, smolyak_nodes, sobol_indices,
                 unstandardize)


class RunError(Exception):
    """A simulation aborted; carries the failing step and the recent
    projection-residual history for diagnosis."""

    def __init__(self, message, step=None, residuals=None):
        super().__init__(message)
        self.step = step
        self.residuals = residuals


class CampaignError(Exception):
    pass


@dataclass
class RunResult:
    config: RunConfig
    mesh: Mesh
    state: object
    times: np.ndarray
    traces: ProbeTraces | None
    functionals: dict
    stats: dict
    cooling_rate: np.ndarray
    sdas_field: np.ndarray
    yield_field: np.ndarray
    grain_field: np.ndarray | None
    grain_flags: np.ndarray | None
    mush_times: np.ndarray | None
    mush_fs: np.ndarray | None


def build_material(cfg: RunConfig) -> MaterialModel:
    gravity = (0.0, 0.0, -9.81) if cfg.gravity else (0.0, 0.0, 0.0)
    return MaterialModel(gravity=gravity, **cfg.material)


def make_thermal_bc(cfg: RunConfig, mesh: Mesh):
    """Per-step Dirichlet boundary data from the patch specs; insulated
    patches simply stay out of the face list."""
    missing = [p for p in cfg.bcs if p not in mesh.patches]
    if missing:
        raise ConfigError(
            f"config references patches not in the mesh: "
            f"{', '.join(sorted(missing))} "
            f"(mesh has: {', '.join(sorted(mesh.patches))})")
    active = [(mesh.patches[p], spec) for p, spec in cfg.bcs.items()
              if spec.kind != "insulated"]
    if not active:
        return None

    def thermal_bc(t_old: float, t_new: float) -> DirichletBC:
        faces, old, new = [], [], []
        for patch_faces, spec in active:
            n = len(patch_faces)
            faces.append(patch_faces)
            old.append(np.full(n, spec.wall_temperature(t_old)))
            new.append(np.full(n, spec.wall_temperature(t_new)))
        return DirichletBC(np.concatenate(faces), np.concatenate(new),
                           np.concatenate(old))

    return thermal_bc


def _safe_extreme(reducer, values) -> float:
    values = np.asarray(values, dtype=float)
    mask = np.isfinite(values)
    if not mask.any():
        return float("nan")
    return float(reducer(values[mask]))


def run_deterministic(cfg: RunConfig, out_dir=None, mesh: Mesh | None = None,
                      progress=None) -> RunResult:
    """Integrate one configuration to its stop condition and reduce the
    result to microstructure fields and scalar functionals."""
    if mesh is None:
        mesh = load_msh(cfg.mesh_path)
    mat = build_material(cfg)
    solver = Solver(mesh, mat, cfg.dt,
                    thermal_bc=make_thermal_bc(cfg, mesh),
                    convection=cfg.convection, omega=cfg.omega,
                    energy_tol=cfg.energy_tol, max_outer=cfg.max_outer,
                    div_tol=cfg.div_tol)
    state = solver.initial_state(cfg.initial_temperature)

    probe_names = list(cfg.probes)
    probe_idx = (nearest_cells(mesh, [cfg.probes[n] for n in probe_names])
                 if probe_names else None)
    times = [0.0]
    rows = [state.T[probe_idx].copy()] if probe_names else None

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    half = 0.5 * cfg.dt
    solid_time = 0.0 if state.fs.min() >= 1.0 else float("nan")
    while not (cfg.stop_at_solid and not np.isnan(solid_time)):
        if cfg.end_time is not None and state.time >= cfg.end_time - half:
            break
        try:
            solver.advance(state)
        except Exception as exc:
            tail = [float(r) for r in solver.stats["div_ratio"][-10:]]
            raise RunError(
                f"simulation failed at step {state.step + 1}: {exc} "
                f"(last projection residual ratios: {tail})",
                step=state.step + 1, residuals=tail) from exc
        times.append(state.time)
        if probe_names:
            rows.append(state.T[probe_idx].copy())
        if np.isnan(solid_time) and state.fs.min() >= 1.0:
            solid_time = state.time
        if (out_dir is not None and cfg.output_every > 0
                and state.step % cfg.output_every == 0):
            write_vtk(mesh, _field_dict(state),
                      os.path.join(out_dir, f"fields_{state.step:06d}.vtk"))
        if progress is not None:
            progress(state)

    traces = (ProbeTraces(probe_names, times, np.vstack(rows))
              if probe_names else None)

    rate = cooling_rate_field(solver.t_liq_cross, solver.t_sol_cross, mat)
    lam = sdas(rate)
    strength = yield_strength(lam)
    grain = flags = mush_t = mush_f = None
    if solver.record_mush and len(solver.mush_times) > 1:
        mush_t = np.asarray(solver.mush_times)
        mush_f = np.vstack(solver.mush_fs)
        grain, flags = grain_size_field(mush_t, mush_f, mat)

    functionals = {
        "solidification_time": solid_time,
        "max_sdas": _safe_extreme(np.max, lam),
        "min_yield": _safe_extreme(np.min, strength),
        "max_grain_size": (_safe_extreme(np.max, grain)
                           if grain is not None else float("nan")),
        "max_temperature": float(state.T.max()),
    }

    result = RunResult(config=cfg, mesh=mesh, state=state,
                       times=np.asarray(times), traces=traces,
                       functionals=functionals, stats=solver.stats,
                       cooling_rate=rate, sdas_field=lam,
                       yield_field=strength, grain_field=grain,
                       grain_flags=flags, mush_times=mush_t, mush_fs=mush_f)
    if out_dir is not None:
        _write_run_outputs(result, out_dir)
    return result


def _field_dict(state) -> dict:
    speed = np.sqrt((state.u ** 2).sum(axis=1))
    return {"temperature": state.T, "solid_fraction": state.fs,
            "pressure": state.p, "speed": speed}


def _write_run_outputs(result: RunResult, out_dir: str) -> None:
    from . import report

    fields = _field_dict(result.state)
    fields["cooling_rate"] = result.cooling_rate
    fields["sdas"] = result.sdas_field
    fields["yield_strength"] = result.yield_field
    if result.grain_field is not None:
        fields["grain_size"] = result.grain_field
    write_vtk(result.mesh, fields, os.path.join(out_dir, "fields_final.vtk"))
    write_functionals(result.functionals,
                      os.path.join(out_dir, "functionals.txt"))
    if result.traces is not None:
        write_probes(result.traces, os.path.join(out_dir, "probes.csv"))
        report.probe_figure(result.traces,
                            os.path.join(out_dir, "probes.png"))
    if result.mush_times is not None:
        report.solidification_figure(
            result.mush_times, result.mush_fs,
            os.path.join(out_dir, "solidification.png"))


# -- campaign ----------------------------------------------------------

@dataclass
class CampaignResult:
    config: CampaignConfig
    xi: np.ndarray
    physical: np.ndarray
    outputs: dict
    models: dict
    sobol: dict
    cache_hits: int
    runs_executed: int
    out_dir: str | None
    trace_models: dict = field(default_factory=dict)
    trace_times: np.ndarray | None = None


def _perturbed_raw(ccfg: CampaignConfig, x_row) -> dict:
    raw = copy.deepcopy(ccfg.raw)
    for inp, val in zip(ccfg.inputs, x_row):
        set_config_value(raw, inp.field_path, float(val))
    return raw


def _sample_payload(index, x_row, functionals, traces) -> dict:
    payload = {"index": int(index), "x": [float(v) for v in x_row],
               "functionals": {k: float(v) for k, v in functionals.items()}}
    if traces is not None:
        payload["times"] = [float(t) for t in traces.times]
        payload["traces"] = {n: [float(v) for v in traces.values[:, j]]
                             for j, n in enumerate(traces.names)}
    return payload


def _run_sample(args):
    """Worker body: one perturbed run, exceptions returned as data so
    the parent can write the reproduction snapshot."""
    index, raw, base_dir, x_row = args
    try:
        cfg = build_run_config(raw, base_dir)
        result = run_deterministic(cfg)
        return ("ok", index,
                _sample_payload(index, x_row, result.functionals,
                                result.traces))
    except Exception as exc:
        return ("error", index, f"{exc}\n{traceback.format_exc()}")


def _cache_path(cache_dir: str, index: int) -> str:
    return os.path.join(cache_dir, f"sample_{index:04d}.json")


def _load_cached(cache_dir: str, index: int, x_row) -> dict | None:
    path = _cache_path(cache_dir, index)
    if not os.path.exists(path):
        return None
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None
    cached_x = np.asarray(payload.get("x", []), dtype=float)
    if cached_x.shape != np.shape(x_row) or not np.allclose(
            cached_x, x_row, rtol=1e-12, atol=0.0):
        return None
    return payload


def run_campaign(ccfg: CampaignConfig, out_dir=None, workers: int = 1,
                 simulate_fn=None, progress=None) -> CampaignResult:
    """Execute the sampling plan and fit one chaos model per output.

    simulate_fn(x) -> {functional: value} replaces the solver for
    testing; it runs serially in the calling process.  Finished samples
    persist under <out_dir>/samples and are reused on re-entry when
    their physical coordinates still match.
    """
    d = len(ccfg.inputs)
    dist = InputDistribution([s.mean for s in ccfg.inputs],
                             [s.sd for s in ccfg.inputs])
    grid = smolyak_nodes(d, ccfg.level)
    n_basis = comb(ccfg.order + d, d)
    if grid.count <= n_basis:
        raise CampaignError(
            f"level {ccfg.level} supplies {grid.count} samples but order "
            f"{ccfg.order} in {d} inputs needs more than {n_basis}; raise "
            f"the level or lower the order")
    xi = grid.nodes
    physical = unstandardize(xi, dist)

    cache_dir = None
    if out_dir is not None:
        cache_dir = os.path.join(out_dir, "samples")
        os.makedirs(cache_dir, exist_ok=True)

    payloads: dict = {}
    cache_hits = 0
    pending = []
    for i in range(grid.count):
        cached = (_load_cached(cache_dir, i, physical[i])
                  if cache_dir is not None else None)
        if cached is not None:
            payloads[i] = cached
            cache_hits += 1
        else:
            pending.append(i)

    def finish_sample(index, payload):
        payloads[index] = payload
        if cache_dir is not None:
            with open(_cache_path(cache_dir, index), "w") as fh:
                json.dump(payload, fh)
        if progress is not None:
            progress(len(payloads), grid.count)

    def fail_sample(index, message):
        snippet = ""
        if out_dir is not None:
            snap = os.path.join(out_dir, f"failed_sample_{index:04d}.cfg")
            with open(snap, "w") as fh:
                fh.write(dump_config(_perturbed_raw(ccfg, physical[index])))
            snippet = f"; config snapshot written to {snap}"
        raise CampaignError(
            f"sample {index} failed{snippet}: {message}")

    if simulate_fn is not None:
        for i in pending:
            try:
                functionals = simulate_fn(physical[i])
            except Exception as exc:
                fail_sample(i, str(exc))
            finish_sample(i, _sample_payload(i, physical[i],
                                             functionals, None))
    elif pending:
        jobs = [(i, _perturbed_raw(ccfg, physical[i]), ccfg.base_dir,
                 physical[i]) for i in pending]
        workers = max(1, min(int(workers), len(jobs)))
        if workers == 1:
            results = map(_run_sample, jobs)
            for status, index, data in results:
                if status != "ok":
                    fail_sample(index, data)
                finish_sample(index, data)
        else:
            with Pool(workers) as pool:
                for status, index, data in pool.imap_unordered(
                        _run_sample, jobs):
                    if status != "ok":
                        pool.terminate()
                        fail_sample(index, data)
                    finish_sample(index, data)

    outputs: dict = {}
    for name in ccfg.outputs:
        col = np.empty(grid.count)
        for i in range(grid.count):
            if name not in payloads[i]["functionals"]:
                raise CampaignError(
                    f"sample {i} returned no value for output '{name}'")
            col[i] = payloads[i]["functionals"][name]
        bad = np.nonzero(~np.isfinite(col))[0]
        if len(bad):
            raise CampaignError(
                f"output '{name}' is undefined at samples "
                f"{bad.tolist()}; adjust the run setup or drop the output")
        outputs[name] = col

    models = {name: fit_pce(xi, w, ccfg.order, dist)
              for name, w in outputs.items()}
    sobol = {name: sobol_indices(model) for name, model in models.items()}

    trace_models, trace_times = _fit_trace_models(ccfg, payloads, xi, dist)

    result = CampaignResult(config=ccfg, xi=xi, physical=physical,
                            outputs=outputs, models=models, sobol=sobol,
                            cache_hits=cache_hits,
                            runs_executed=len(pending),
                            out_dir=out_dir, trace_models=trace_models,
                            trace_times=trace_times)
    if out_dir is not None:
        _write_campaign_outputs(result)
    return result


def _fit_trace_models(ccfg, payloads, xi, dist):
    """Chaos coefficients for every probe at every shared output time,
    one orthogonal factorization per probe.  Skipped when sample runs
    disagree on the time axis (variable-length runs)."""
    first = payloads[0]
    if "traces" not in first or not first["traces"]:
        return {}, None
    times = np.asarray(first["times"])
    for p in payloads.values():
        if ("times" not in p or len(p["times"]) != len(times)
                or not np.allclose(p["times"], times)):
            return {}, None
    from .uq import multi_indices
    idx = multi_indices(xi.shape[1], ccfg.order)
    psi = basis_matrix(idx, xi)
    models = {}
    for probe in first["traces"]:
        w = np.vstack([payloads[i]["traces"][probe]
                       for i in range(len(payloads))])
        coeffs, _, rank, _ = np.linalg.lstsq(psi, w, rcond=None)
        if rank < len(idx):
            return {}, None
        models[probe] = (idx, coeffs)
    return models, times


def _write_campaign_outputs(result: CampaignResult) -> None:
    from . import report
    from .uq import save_pce

    ccfg = result.config
    out = result.out_dir
    names = [s.name for s in ccfg.inputs]
    write_samples_csv(names, result.xi, result.physical,
                      os.path.join(out, "samples.csv"))
    write_sobol_csv(result.sobol, names, os.path.join(out, "sobol.csv"))
    report.sobol_figure(result.sobol, names,
                        os.path.join(out, "sobol.png"))
    means = {n: float(m.coeffs[0]) for n, m in result.models.items()}
    write_functionals(means, os.path.join(out, "output_means.txt"))
    for fname, model in result.models.items():
        save_pce(model, os.path.join(out, f"model_{fname}.pce"))

    if len(ccfg.inputs) >= 2:
        if ccfg.surface_pair is not None:
            dims = (names.index(ccfg.surface_pair[0]),
                    names.index(ccfg.surface_pair[1]))
        else:
            dims = (0, 1)
        for fname, model in result.models.items():
            xv, yv, grid = response_surface(model, dims, resolution=33)
            base = os.path.join(out, f"response_{fname}")
            write_surface_csv(xv, yv, grid, names[dims[0]], names[dims[1]],
                              base + ".csv")
            report.surface_figure(xv, yv, grid, names[dims[0]],
                                  names[dims[1]], fname, base + ".png")

    if result.trace_models:
        _write_trace_envelopes(result)


def _write_trace_envelopes(result: CampaignResult) -> None:
    """Mean and standard deviation of each probe trace implied by the
    per-time chaos coefficients."""
    from math import factorial

    probes = sorted(result.trace_models)
    header = ["time"]
    for p in probes:
        header += [f"{p}_mean", f"{p}_sd"]
    lines = [",".join(header)]
    nt = len(result.trace_times)
    cols = []
    for p in probes:
        idx, coeffs = result.trace_models[p]
        norms = np.array([np.prod([factorial(j) for j in a]) for a in idx])
        mean = coeffs[0]
        var = (coeffs[1:] ** 2 * norms[1:, None]).sum(axis=0)
        cols.append((mean, np.sqrt(np.maximum(var, 0.0))))
    for t in range(nt):
        row = [repr(float(result.trace_times[t]))]
        for mean, sd in cols:
            row += [repr(float(mean[t])), repr(float(sd[t]))]
        lines.append(",".join(row))
    path = os.path.join(result.out_dir, "probe_envelopes.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
