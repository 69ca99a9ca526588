"""Run and campaign configuration files.

Flat key-value text with bracketed section headers.  Every physical
value carries a unit suffix that is validated against the key it
configures and converted to SI at parse time; structural values
(paths, switches, counts, solver tolerances) are bare.  Campaign input
sections tie a named random variable to one config field by a dotted
path and state its mean and standard deviation in that field's unit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field


class ConfigError(Exception):
    pass


_FAMILIES = {
    "time": {"s": 1.0, "min": 60.0, "ms": 1e-3},
    "temperature": {"K": 1.0},
    "rate": {"K/s": 1.0, "K/min": 1.0 / 60.0},
    "length": {"m": 1.0, "cm": 1e-2, "mm": 1e-3},
    "density": {"kg/m^3": 1.0},
    "viscosity": {"Pa*s": 1.0},
    "heat_capacity": {"J/kg/K": 1.0},
    "conductivity": {"W/m/K": 1.0},
    "specific_energy": {"J/kg": 1.0, "kJ/kg": 1e3},
    "inv_temperature": {"1/K": 1.0},
    "diffusivity": {"m^2/s": 1.0},
    "content": {"wt%": 1.0},
    "liquidus_slope": {"K/wt%": 1.0},
}

_CANONICAL = {fam: next(u for u, f in units.items() if f == 1.0)
              for fam, units in _FAMILIES.items()}

# key name -> unit family; a key means the same quantity in any section
_PHYSICAL = {
    "density": "density",
    "viscosity": "viscosity",
    "heat_capacity": "heat_capacity",
    "conductivity": "conductivity",
    "conductivity_temps": "temperature",
    "latent_heat": "specific_energy",
    "expansion": "inv_temperature",
    "fusion_temperature": "temperature",
    "liquidus": "temperature",
    "liquidus_slope": "liquidus_slope",
    "solidus": "temperature",
    "smear_width": "temperature",
    "reference_temperature": "temperature",
    "dendrite_spacing": "length",
    "solute_diffusivity": "diffusivity",
    "solute_content": "content",
    "initial_temperature": "temperature",
    "temperature": "temperature",
    "start_temperature": "temperature",
    "offset": "temperature",
    "rate": "rate",
    "dt": "time",
    "end_time": "time",
}
_MULTI = {"conductivity", "conductivity_temps"}
_BOOL = {"gravity", "convection", "stop_at_full_solidification"}
_INT = {"output_every", "max_outer", "level", "order"}
_BARE = {"partition", "energy_tolerance", "divergence_tolerance", "omega"}
_STRING = {"path", "type", "field"}
_STRLIST = {"outputs", "response_surface"}

_FIXED_SECTIONS = {"mesh", "material", "simulation", "solver", "probes",
                   "campaign"}

_TRUE = {"true", "on", "yes"}
_FALSE = {"false", "off", "no"}


@dataclass
class BoundarySpec:
    """One boundary patch: fixed temperature, linear cooling, or
    insulated.  A cooling wall follows start + offset - rate * t."""

    kind: str
    temperature: float = 0.0
    start: float = 0.0
    rate: float = 0.0
    offset: float = 0.0

    def wall_temperature(self, t: float) -> float:
        if self.kind == "fixed":
            return self.temperature
        return self.start + self.offset - self.rate * t


@dataclass
class RunConfig:
    mesh_path: str
    material: dict
    bcs: dict
    initial_temperature: float
    dt: float
    gravity: bool = True
    convection: bool = True
    end_time: float | None = None
    stop_at_solid: bool = False
    output_every: int = 0
    probes: dict = field(default_factory=dict)
    energy_tol: float = 1e-6
    div_tol: float = 1e-8
    max_outer: int = 25
    omega: float = 1.0


@dataclass
class StochasticInput:
    name: str
    field_path: str
    mean: float
    sd: float


@dataclass
class CampaignConfig:
    run: RunConfig
    raw: dict
    base_dir: str
    inputs: list
    level: int
    order: int
    outputs: tuple
    surface_pair: tuple | None = None


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _float(tok: str, ln: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ConfigError(f"line {ln}: expected a number, got '{tok}'")


def _unit_value(tokens, family: str, key: str, ln: int, multi: bool = False):
    units = _FAMILIES[family]
    allowed = "/".join(units)
    if len(tokens) < 2 or _is_number(tokens[-1]):
        raise ConfigError(f"line {ln}: '{key}' needs a unit ({allowed})")
    unit = tokens[-1]
    if unit not in units:
        raise ConfigError(
            f"line {ln}: unit '{unit}' is not valid for '{key}' "
            f"(expected {allowed})")
    vals = tuple(_float(t, ln) * units[unit] for t in tokens[:-1])
    if multi:
        # a one-entry list collapses to a scalar so it can be targeted
        # by a campaign input
        return vals if len(vals) > 1 else vals[0]
    if len(vals) != 1:
        raise ConfigError(f"line {ln}: '{key}' takes a single value")
    return vals[0]


def _target_key(path: str) -> str:
    return path.rsplit(".", 1)[-1].strip()


def _convert(section: str, key: str, rhs: str, ln: int, entries: dict):
    tokens = rhs.split()
    if section == "probes":
        if len(tokens) != 4:
            raise ConfigError(
                f"line {ln}: probe '{key}' needs 'x y z <unit>'")
        return _unit_value(tokens, "length", key, ln, multi=True)
    if section.startswith("campaign.input.") and key in ("mean", "sd"):
        if "field" not in entries:
            raise ConfigError(
                f"line {ln}: [{section}] needs a 'field' entry to give "
                f"'{key}' its unit")
        fam = _PHYSICAL.get(_target_key(entries["field"][1]))
        if fam is None:
            if len(tokens) != 1:
                raise ConfigError(
                    f"line {ln}: '{key}' for a dimensionless field is bare")
            return _float(tokens[0], ln)
        return _unit_value(tokens, fam, key, ln)
    if key in _BOOL:
        tok = rhs.lower()
        if tok in _TRUE:
            return True
        if tok in _FALSE:
            return False
        raise ConfigError(f"line {ln}: '{key}' must be true/false or on/off")
    if key in _INT:
        if len(tokens) != 1 or not tokens[0].lstrip("+-").isdigit():
            raise ConfigError(f"line {ln}: '{key}' must be an integer")
        return int(tokens[0])
    if key in _STRING:
        return rhs
    if key in _STRLIST:
        return tuple(tokens)
    if key in _BARE:
        if len(tokens) != 1:
            raise ConfigError(f"line {ln}: '{key}' takes one bare number")
        return _float(tokens[0], ln)
    if key in _PHYSICAL:
        return _unit_value(tokens, _PHYSICAL[key], key, ln,
                           multi=key in _MULTI)
    raise ConfigError(f"line {ln}: unknown key '{key}' in [{section}]")


def _check_section_name(section: str, ln: int) -> None:
    if section in _FIXED_SECTIONS:
        return
    if section.startswith("bc.") and len(section) > 3:
        return
    if section.startswith("campaign.input.") and len(section) > 15:
        return
    raise ConfigError(f"line {ln}: unknown section [{section}]")


def parse_config_text(text: str) -> dict:
    """Parse config text into {section: {key: SI value}}."""
    staged: dict = {}
    section = None
    for ln, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {ln}: malformed section header")
            section = line[1:-1].strip()
            _check_section_name(section, ln)
            if section in staged:
                raise ConfigError(f"line {ln}: duplicate section [{section}]")
            staged[section] = {}
            continue
        if section is None:
            raise ConfigError(f"line {ln}: value before any section header")
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, rhs = (p.strip() for p in line.split("=", 1))
        if not key or not rhs:
            raise ConfigError(f"line {ln}: empty key or value")
        if key in staged[section]:
            raise ConfigError(
                f"line {ln}: duplicate key '{key}' in [{section}]")
        staged[section][key] = (ln, rhs)
    raw: dict = {}
    for section, entries in staged.items():
        raw[section] = {key: _convert(section, key, rhs, ln, entries)
                        for key, (ln, rhs) in entries.items()}
    return raw


def parse_config_file(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


# -- run config --------------------------------------------------------

_MAT_MAP = {
    "density": "rho",
    "viscosity": "mu",
    "heat_capacity": "cp",
    "latent_heat": "latent_heat",
    "expansion": "beta",
    "partition": "k_partition",
    "fusion_temperature": "t_fusion",
    "liquidus": "t_liq",
    "solidus": "t_sol",
    "dendrite_spacing": "dendrite_spacing",
    "solute_diffusivity": "solute_diff",
    "solute_content": "c0",
    "smear_width": "t_eps",
    "reference_temperature": "t_ref",
}
_MAT_REQUIRED = ("density", "viscosity", "heat_capacity", "conductivity",
                 "latent_heat", "expansion", "partition",
                 "fusion_temperature", "solidus", "dendrite_spacing")

_BC_KEYS = {
    "fixed": ({"temperature"}, {"type", "temperature"}),
    "cooling": ({"start_temperature", "rate"},
                {"type", "start_temperature", "rate", "offset"}),
    "insulated": (set(), {"type"}),
}


def _section(raw: dict, name: str, required: bool = True) -> dict:
    if name not in raw:
        if required:
            raise ConfigError(f"missing section [{name}]")
        return {}
    return raw[name]


def _check_keys(section: str, entries: dict, allowed) -> None:
    extra = set(entries) - set(allowed)
    if extra:
        raise ConfigError(
            f"[{section}] has unknown keys: {', '.join(sorted(extra))}")


def _build_material_dict(mat_sec: dict) -> dict:
    for k in _MAT_REQUIRED:
        if k not in mat_sec:
            raise ConfigError(f"[material] is missing '{k}'")
    _check_keys("material", mat_sec,
                set(_MAT_MAP) | {"conductivity", "conductivity_temps",
                                 "liquidus_slope"})
    kv = mat_sec["conductivity"]
    if isinstance(kv, float):
        kv = (kv,)
    kt = mat_sec.get("conductivity_temps")
    if kt is None:
        if len(kv) != 1:
            raise ConfigError(
                "[material] conductivity table needs conductivity_temps")
        kt = (300.0,)
    else:
        if isinstance(kt, float):
            kt = (kt,)
        if len(kt) != len(kv):
            raise ConfigError("[material] conductivity and "
                              "conductivity_temps differ in length")

    # the liquidus comes either directly or as a linear function of the
    # solute content (dilute-alloy phase-diagram approximation)
    if "liquidus_slope" in mat_sec:
        if "liquidus" in mat_sec:
            raise ConfigError(
                "[material] give liquidus or liquidus_slope, not both")
        if "solute_content" not in mat_sec:
            raise ConfigError(
                "[material] liquidus_slope needs solute_content")
        t_liq = (mat_sec["fusion_temperature"]
                 - mat_sec["liquidus_slope"] * mat_sec["solute_content"])
    elif "liquidus" in mat_sec:
        t_liq = mat_sec["liquidus"]
    else:
        raise ConfigError("[material] is missing 'liquidus'")

    out = {"k_temps": kt, "k_values": kv, "t_liq": t_liq}
    for key, val in mat_sec.items():
        if key in ("conductivity", "conductivity_temps", "liquidus",
                   "liquidus_slope"):
            continue
        out[_MAT_MAP[key]] = val
    return out


def _build_bcs(raw: dict) -> dict:
    bcs = {}
    for section, entries in raw.items():
        if not section.startswith("bc."):
            continue
        patch = section[3:]
        kind = entries.get("type")
        if kind not in _BC_KEYS:
            raise ConfigError(
                f"[{section}] type must be fixed, cooling, or insulated")
        required, allowed = _BC_KEYS[kind]
        missing = required - set(entries)
        if missing:
            raise ConfigError(
                f"[{section}] is missing: {', '.join(sorted(missing))}")
        _check_keys(section, entries, allowed)
        bcs[patch] = BoundarySpec(
            kind=kind,
            temperature=entries.get("temperature", 0.0),
            start=entries.get("start_temperature", 0.0),
            rate=entries.get("rate", 0.0),
            offset=entries.get("offset", 0.0))
    return bcs


def build_run_config(raw: dict, base_dir: str = ".") -> RunConfig:
    mesh_sec = _section(raw, "mesh")
    _check_keys("mesh", mesh_sec, {"path"})
    if "path" not in mesh_sec:
        raise ConfigError("[mesh] needs 'path'")
    mesh_path = mesh_sec["path"]
    if not os.path.isabs(mesh_path):
        mesh_path = os.path.join(base_dir, mesh_path)

    material = _build_material_dict(_section(raw, "material"))

    sim = _section(raw, "simulation")
    _check_keys("simulation", sim,
                {"initial_temperature", "dt", "end_time",
                 "stop_at_full_solidification", "gravity", "convection",
                 "output_every"})
    for k in ("initial_temperature", "dt"):
        if k not in sim:
            raise ConfigError(f"[simulation] is missing '{k}'")
    if sim["dt"] <= 0:
        raise ConfigError("[simulation] dt must be positive")
    end_time = sim.get("end_time")
    stop_at_solid = sim.get("stop_at_full_solidification", False)
    if end_time is None and not stop_at_solid:
        raise ConfigError(
            "[simulation] needs end_time or stop_at_full_solidification")
    output_every = sim.get("output_every", 0)
    if output_every < 0:
        raise ConfigError("[simulation] output_every must be >= 0")

    sol = _section(raw, "solver", required=False)
    _check_keys("solver", sol, {"energy_tolerance", "divergence_tolerance",
                                "max_outer", "omega"})

    return RunConfig(
        mesh_path=mesh_path,
        material=material,
        bcs=_build_bcs(raw),
        initial_temperature=sim["initial_temperature"],
        dt=sim["dt"],
        gravity=sim.get("gravity", True),
        convection=sim.get("convection", True),
        end_time=end_time,
        stop_at_solid=stop_at_solid,
        output_every=output_every,
        probes={k: tuple(v) for k, v in raw.get("probes", {}).items()},
        energy_tol=sol.get("energy_tolerance", 1e-6),
        div_tol=sol.get("divergence_tolerance", 1e-8),
        max_outer=sol.get("max_outer", 25),
        omega=sol.get("omega", 1.0))


# -- campaign config ---------------------------------------------------

FUNCTIONALS = ("solidification_time", "max_sdas", "min_yield",
               "max_grain_size", "max_temperature")


def _resolve_field(raw: dict, field_path: str):
    if "." not in field_path:
        raise ConfigError(f"field path '{field_path}' needs a section")
    section, key = field_path.rsplit(".", 1)
    if section not in raw or key not in raw[section]:
        raise ConfigError(f"field path '{field_path}' is not in the config")
    if not isinstance(raw[section][key], float):
        raise ConfigError(f"field '{field_path}' is not a scalar value")
    return section, key


def set_config_value(raw: dict, field_path: str, value: float) -> None:
    """Overwrite one scalar config field addressed as section.key."""
    section, key = _resolve_field(raw, field_path)
    raw[section][key] = float(value)


def build_campaign_config(raw: dict, base_dir: str = ".") -> CampaignConfig:
    run = build_run_config(raw, base_dir)
    camp = _section(raw, "campaign")
    _check_keys("campaign", camp,
                {"level", "order", "outputs", "response_surface"})
    level = camp.get("level", 4)
    if level < 1:
        raise ConfigError("[campaign] level must be >= 1")
    order = camp.get("order", level - 1)
    if order < 1:
        raise ConfigError("[campaign] order must be >= 1")
    outputs = camp.get("outputs", FUNCTIONALS[:4])
    bad = set(outputs) - set(FUNCTIONALS)
    if bad:
        raise ConfigError(
            f"[campaign] unknown outputs: {', '.join(sorted(bad))} "
            f"(known: {', '.join(FUNCTIONALS)})")

    inputs = []
    for section, entries in raw.items():
        if not section.startswith("campaign.input."):
            continue
        name = section[len("campaign.input."):]
        _check_keys(section, entries, {"field", "mean", "sd"})
        for k in ("field", "mean", "sd"):
            if k not in entries:
                raise ConfigError(f"[{section}] is missing '{k}'")
        if entries["sd"] <= 0:
            raise ConfigError(f"[{section}] sd must be positive")
        _resolve_field(raw, entries["field"])
        inputs.append(StochasticInput(name, entries["field"],
                                      entries["mean"], entries["sd"]))
    if not inputs:
        raise ConfigError("campaign needs at least one [campaign.input.*]")
    paths = [s.field_path for s in inputs]
    if len(set(paths)) != len(paths):
        raise ConfigError("two campaign inputs target the same config field")

    pair = camp.get("response_surface")
    if pair is not None:
        names = [s.name for s in inputs]
        if len(pair) != 2 or any(p not in names for p in pair):
            raise ConfigError(
                "[campaign] response_surface needs two input names")
        pair = tuple(pair)
    return CampaignConfig(run=run, raw=raw, base_dir=base_dir,
                          inputs=inputs, level=level, order=order,
                          outputs=tuple(outputs), surface_pair=pair)


def load_run_config(path) -> RunConfig:
    return build_run_config(parse_config_file(path),
                            os.path.dirname(os.path.abspath(path)))


def load_campaign_config(path) -> CampaignConfig:
    return build_campaign_config(parse_config_file(path),
                                 os.path.dirname(os.path.abspath(path)))


# -- serialization -----------------------------------------------------

def _format_value(section: str, key: str, val, entries: dict) -> str:
    if section == "probes":
        return " ".join(repr(v) for v in val) + " m"
    if section.startswith("campaign.input.") and key in ("mean", "sd"):
        fam = _PHYSICAL.get(_target_key(entries["field"]))
        if fam is None:
            return repr(val)
        return f"{val!r} {_CANONICAL[fam]}"
    if key in _BOOL:
        return "true" if val else "false"
    if key in _INT:
        return str(val)
    if key in _STRING:
        return val
    if key in _STRLIST:
        return " ".join(val)
    if key in _BARE:
        return repr(val)
    fam = _PHYSICAL[key]
    unit = _CANONICAL[fam]
    if isinstance(val, tuple):
        return " ".join(repr(v) for v in val) + f" {unit}"
    return f"{val!r} {unit}"


def dump_config(raw: dict) -> str:
    """Config text that parses back to the same raw dict, with all
    values in canonical SI units."""
    lines = []
    for section, entries in raw.items():
        lines.append(f"[{section}]")
        for key, val in entries.items():
            lines.append(
                f"{key} = {_format_value(section, key, val, entries)}")
        lines.append("")
    return "\n".join(lines)
