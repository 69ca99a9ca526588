"""Command-line entry points.

run       integrate one configuration and write fields, probes, report
campaign  sample a configuration under its input distributions and fit
          chaos models with sensitivity tables
mesh-info inspect a mesh file
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .campaign import (CampaignError, RunError, run_campaign,
                       run_deterministic)
from .config import (ConfigError, build_campaign_config, load_run_config,
                     parse_config_file)
from .mesh import MeshFormatError, MeshGeometryError, load_msh, tets_to_hexes
from .output import OutputError
from .uq import pce_moments


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="solidfv",
        description="Finite-volume solidification simulation with "
                    "sparse-grid uncertainty quantification.")
    parser.add_argument("--version", action="version",
                        version=f"solidfv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate one configuration")
    p_run.add_argument("config", help="run configuration file")
    p_run.add_argument("--out", default="out", metavar="DIR",
                       help="output directory (default: out)")
    p_run.add_argument("--no-convection", action="store_true",
                       help="disable the flow solve, keep pure conduction")

    p_camp = sub.add_parser("campaign", help="run a sampling campaign")
    p_camp.add_argument("config", help="campaign configuration file")
    p_camp.add_argument("--out", default="out", metavar="DIR",
                        help="output directory (default: out)")
    p_camp.add_argument("--workers", type=int, default=1, metavar="N",
                        help="parallel sample processes (default: 1)")
    p_camp.add_argument("--level", type=int, default=None, metavar="L",
                        help="override the sparse-grid level")
    p_camp.add_argument("--no-convection", action="store_true",
                        help="disable the flow solve in every sample")

    p_info = sub.add_parser("mesh-info", help="inspect a mesh file")
    p_info.add_argument("mesh", help="MSH 2.2 file")
    return parser


def _cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    if args.no_convection:
        cfg.convection = False
    result = run_deterministic(cfg, out_dir=args.out)
    print(f"finished at t = {result.state.time:g} s "
          f"after {result.state.step} steps")
    for name, value in result.functionals.items():
        print(f"  {name} = {value:g}")
    print(f"outputs in {args.out}")
    return 0


def _cmd_campaign(args) -> int:
    raw = parse_config_file(args.config)
    if args.level is not None:
        raw.setdefault("campaign", {})["level"] = int(args.level)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    ccfg = build_campaign_config(raw, base_dir)
    if args.no_convection:
        ccfg.raw.setdefault("simulation", {})["convection"] = False
        ccfg.run.convection = False

    def progress(done, total):
        print(f"  sample {done}/{total} complete", flush=True)

    result = run_campaign(ccfg, out_dir=args.out, workers=args.workers,
                          progress=progress)
    print(f"campaign: {len(result.xi)} samples at level {ccfg.level} "
          f"({result.cache_hits} cached, {result.runs_executed} run)")
    names = [s.name for s in ccfg.inputs]
    for fname, model in result.models.items():
        mean, var = pce_moments(model)
        first, total, defined = result.sobol[fname]
        if defined:
            lead = names[int(np.argmax(total))]
            print(f"  {fname}: mean {mean:g}, sd {np.sqrt(var):g}, "
                  f"most sensitive to {lead}")
        else:
            print(f"  {fname}: mean {mean:g}, no variance")
    print(f"outputs in {args.out}")
    return 0


def _cmd_mesh_info(args) -> int:
    mesh = load_msh(args.mesh)
    if mesh.cell_kind == "tet":
        mesh = tets_to_hexes(mesh)
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    print(f"vertices: {mesh.n_vertices}")
    print(f"cells:    {mesh.n_cells} (hex)")
    print(f"faces:    {mesh.n_faces} "
          f"({len(mesh.interior_faces())} interior, "
          f"{len(mesh.boundary_faces())} boundary)")
    print(f"extent:   [{lo[0]:g}, {hi[0]:g}] x [{lo[1]:g}, {hi[1]:g}] "
          f"x [{lo[2]:g}, {hi[2]:g}] m")
    print(f"volume:   {mesh.cell_volume.sum():g} m^3 "
          f"(cells {mesh.cell_volume.min():g} to {mesh.cell_volume.max():g})")
    if mesh.patches:
        print("patches:")
        for name in sorted(mesh.patches):
            print(f"  {name}: {len(mesh.patches[name])} faces")
    else:
        print("patches:  none")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "campaign":
            return _cmd_campaign(args)
        return _cmd_mesh_info(args)
    except (ConfigError, OutputError, MeshFormatError, MeshGeometryError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RunError, CampaignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
