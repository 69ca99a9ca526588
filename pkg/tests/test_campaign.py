"""Tests for deterministic runs and uncertainty campaigns."""

import glob
import json
import os

import numpy as np
import pytest

from solidfv.campaign import (CampaignError, RunError, make_thermal_bc,
                              run_campaign, run_deterministic)
from solidfv.config import (ConfigError, build_campaign_config,
                            build_run_config, parse_config_text)
from solidfv.meshgen import box_mesh
from solidfv.microstructure import (cooling_rate_field, sdas, yield_strength)
from solidfv.output import write_msh
from solidfv.uq import evaluate_pce

MATERIAL = """
[material]
density = 2600 kg/m^3
viscosity = 1.3e-3 Pa*s
heat_capacity = 900 J/kg/K
conductivity = 120 W/m/K
latent_heat = 3.9e5 J/kg
expansion = 1e-4 1/K
partition = 0.13
fusion_temperature = 933 K
liquidus = 866 K
solidus = 811 K
smear_width = 1 K
dendrite_spacing = 1e-5 m
solute_diffusivity = 3e-9 m^2/s
solute_content = 10 wt%
"""


def bar_text(mesh_path):
    return f"""
[mesh]
path = {mesh_path}
{MATERIAL}
[bc.xmin]
type = cooling
start_temperature = 870 K
rate = 4 K/s

[simulation]
initial_temperature = 870 K
dt = 0.05 s
end_time = 120 s
stop_at_full_solidification = true
gravity = false
convection = false

[probes]
cold = 0.001 0.001 0.001 m
hot = 0.019 0.001 0.001 m
"""


@pytest.fixture(scope="module")
def bar_mesh_path(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("mesh") / "bar.msh")
    write_msh(box_mesh(10, 1, 1, (0.02, 0.002, 0.002)), path)
    return path


@pytest.fixture(scope="module")
def bar_result(bar_mesh_path):
    cfg = build_run_config(parse_config_text(bar_text(bar_mesh_path)))
    return run_deterministic(cfg)


class TestQuiescent:
    def test_uniform_insulated_domain_stays_constant(self, bar_mesh_path):
        text = bar_text(bar_mesh_path).replace(
            "type = cooling\nstart_temperature = 870 K\nrate = 4 K/s",
            "type = insulated")
        text = text.replace("stop_at_full_solidification = true\n", "")
        text = text.replace("end_time = 120 s", "end_time = 0.5 s")
        cfg = build_run_config(parse_config_text(text))
        res = run_deterministic(cfg)
        assert abs(res.state.T - 870.0).max() < 1e-9
        assert np.all(res.state.u == 0.0)
        span = res.traces.values.max(axis=0) - res.traces.values.min(axis=0)
        assert span.max() < 1e-9
        assert np.isnan(res.functionals["solidification_time"])
        assert res.functionals["max_temperature"] == pytest.approx(870.0,
                                                                   abs=1e-9)


class TestCoolingBar:
    def test_runs_to_full_solidification(self, bar_result):
        assert bar_result.state.fs.min() == 1.0
        assert bar_result.functionals["solidification_time"] == \
            bar_result.times[-1]

    def test_frozen_functionals(self, bar_result):
        # regression values pinned from this exact configuration
        f = bar_result.functionals
        assert f["solidification_time"] == pytest.approx(39.2, abs=1e-9)
        assert f["max_sdas"] == pytest.approx(33.419590, abs=1e-3)
        assert f["min_yield"] == pytest.approx(130.505903, abs=1e-3)
        assert f["max_grain_size"] == pytest.approx(5.408946e-4, rel=1e-3)
        assert f["max_temperature"] == pytest.approx(807.233263, abs=1e-3)

    def test_probe_traces_follow_cell_history(self, bar_result):
        vals = bar_result.traces.values
        assert bar_result.traces.names == ("cold", "hot")
        assert vals.shape == (len(bar_result.times), 2)
        # cooled end stays below the far end at every recorded step
        assert np.all(vals[:, 0] <= vals[:, 1] + 1e-12)
        assert vals[-1, 1] == bar_result.state.T[-1]

    def test_monotone_cooling(self, bar_result):
        t = bar_result.traces.values[:, 0]
        assert np.all(np.diff(t) < 1e-9)

    def test_functionals_match_field_recompute(self, bar_result):
        rate = bar_result.cooling_rate
        assert np.nanmax(sdas(rate)) == pytest.approx(
            bar_result.functionals["max_sdas"], rel=1e-12)
        assert np.nanmin(yield_strength(sdas(rate))) == pytest.approx(
            bar_result.functionals["min_yield"], rel=1e-12)

    def test_bit_determinism(self, bar_mesh_path, bar_result):
        cfg = build_run_config(parse_config_text(bar_text(bar_mesh_path)))
        res = run_deterministic(cfg)
        np.testing.assert_array_equal(res.state.T, bar_result.state.T)
        np.testing.assert_array_equal(res.traces.values,
                                      bar_result.traces.values)

    def test_output_files(self, bar_mesh_path, tmp_path):
        text = bar_text(bar_mesh_path).replace(
            "end_time = 120 s", "end_time = 0.3 s")
        text = text.replace("stop_at_full_solidification = true",
                            "output_every = 3")
        cfg = build_run_config(parse_config_text(text))
        out = str(tmp_path / "run")
        run_deterministic(cfg, out_dir=out)
        for name in ("fields_final.vtk", "functionals.txt", "probes.csv",
                     "probes.png", "solidification.png"):
            assert os.path.exists(os.path.join(out, name))
        assert os.path.exists(os.path.join(out, "fields_000003.vtk"))


class TestRunErrors:
    def test_unknown_patch(self, bar_mesh_path):
        text = bar_text(bar_mesh_path).replace("[bc.xmin]", "[bc.north]")
        cfg = build_run_config(parse_config_text(text))
        with pytest.raises(ConfigError, match="north.*mesh has"):
            run_deterministic(cfg)

    def test_insulated_everywhere_gives_no_bc(self, bar_mesh_path):
        text = bar_text(bar_mesh_path).replace(
            "type = cooling\nstart_temperature = 870 K\nrate = 4 K/s",
            "type = insulated")
        cfg = build_run_config(parse_config_text(text))
        from solidfv.mesh import load_msh
        assert make_thermal_bc(cfg, load_msh(bar_mesh_path)) is None

    def test_failure_carries_step_and_residuals(self, bar_mesh_path):
        text = bar_text(bar_mesh_path) + "\n[solver]\nmax_outer = 1\n"
        cfg = build_run_config(parse_config_text(text))
        with pytest.raises(RunError, match="simulation failed at step"):
            run_deterministic(cfg)


def campaign_text(mesh_path):
    return bar_text(mesh_path) + """
[campaign]
level = 2
outputs = solidification_time max_sdas

[campaign.input.rate]
field = bc.xmin.rate
mean = 4 K/s
sd = 0.2 K/s

[campaign.input.latent]
field = material.latent_heat
mean = 3.9e5 J/kg
sd = 8e3 J/kg
"""


def oracle_hook(weights, means, sds):
    """Build a simulate_fn returning a linear blend of standardized
    inputs for every functional, with known Sobol shares."""
    def fake(x):
        xi = (np.asarray(x) - means) / sds
        val = float(np.dot(weights, xi))
        return {name: val for name in
                ("solidification_time", "max_sdas", "min_yield",
                 "max_grain_size", "max_temperature")}
    return fake


def input_scales(ccfg):
    return (np.array([i.mean for i in ccfg.inputs]),
            np.array([i.sd for i in ccfg.inputs]))


class TestCampaignOracles:
    def test_additive_model_sobol(self, bar_mesh_path, tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))
        means, sds = input_scales(ccfg)
        res = run_campaign(ccfg, out_dir=str(tmp_path / "c"),
                           simulate_fn=oracle_hook(np.array([1.0, 2.0]),
                                                   means, sds))
        first, total, defined = res.sobol["solidification_time"]
        assert defined
        np.testing.assert_allclose(first, [0.2, 0.8], atol=1e-10)
        np.testing.assert_allclose(total, [0.2, 0.8], atol=1e-10)

    def test_model_reproduces_hook_values(self, bar_mesh_path, tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))
        means, sds = input_scales(ccfg)
        res = run_campaign(ccfg, out_dir=str(tmp_path / "c"),
                           simulate_fn=oracle_hook(np.array([1.5, -0.5]),
                                                   means, sds))
        model = res.models["max_sdas"]
        xi = np.array([[0.3, -1.2], [0.0, 0.0], [2.0, 1.0]])
        expect = 1.5 * xi[:, 0] - 0.5 * xi[:, 1]
        np.testing.assert_allclose(evaluate_pce(model, xi), expect,
                                   atol=1e-10)

    def test_hook_receives_sparse_grid_samples(self, bar_mesh_path, tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))
        means, sds = input_scales(ccfg)
        seen = []

        def simulate(x):
            seen.append(tuple(x))
            return {n: 1.0 for n in ccfg.outputs}

        from solidfv.uq import InputDistribution, smolyak_nodes, unstandardize
        run_campaign(ccfg, out_dir=str(tmp_path / "c"), simulate_fn=simulate)
        grid = smolyak_nodes(2, ccfg.level)
        expect = unstandardize(grid.nodes, InputDistribution(means, sds))
        np.testing.assert_allclose(np.array(seen), expect, atol=1e-12)
        rates = sorted(x[0] for x in seen)
        assert rates[0] < 4.0 < rates[-1]


class TestCampaignGuards:
    def test_too_few_samples_for_order(self, bar_mesh_path):
        text = campaign_text(bar_mesh_path).replace(
            "level = 2", "level = 2\norder = 3")
        ccfg = build_campaign_config(parse_config_text(text))
        with pytest.raises(CampaignError, match="raise the level"):
            run_campaign(ccfg, simulate_fn=lambda x: {
                n: 0.0 for n in ccfg.outputs})

    def test_failed_sample_writes_snapshot(self, bar_mesh_path, tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))

        def simulate(x):
            if x[0] > 4.0:
                raise ValueError("synthetic blowup")
            return {n: 1.0 for n in ccfg.outputs}

        out = str(tmp_path / "c")
        with pytest.raises(CampaignError,
                           match="snapshot written.*synthetic blowup"):
            run_campaign(ccfg, out_dir=out, simulate_fn=simulate)
        snaps = glob.glob(os.path.join(out, "failed_sample_*.cfg"))
        assert len(snaps) == 1
        # the snapshot is a loadable config carrying the perturbed rate
        snap_raw = parse_config_text(open(snaps[0]).read())
        assert snap_raw["bc.xmin"]["rate"] > 4.0

    def test_non_finite_output_rejected(self, bar_mesh_path, tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))

        def simulate(x):
            vals = {n: 1.0 for n in ccfg.outputs}
            if x[0] > 4.0:
                vals["max_sdas"] = float("nan")
            return vals

        with pytest.raises(CampaignError, match="max_sdas.*undefined"):
            run_campaign(ccfg, out_dir=str(tmp_path / "c"),
                         simulate_fn=simulate)


class TestCache:
    def test_resume_runs_only_missing(self, bar_mesh_path, tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))
        means, sds = input_scales(ccfg)
        hook = oracle_hook(np.array([1.0, 2.0]), means, sds)
        out = str(tmp_path / "c")
        calls = []

        def failing(x):
            calls.append(tuple(x))
            if len(calls) == 3:
                raise RuntimeError("interrupted")
            return hook(x)

        with pytest.raises(CampaignError):
            run_campaign(ccfg, out_dir=out, simulate_fn=failing)
        done = glob.glob(os.path.join(out, "samples", "sample_*.json"))
        assert len(done) == 2

        calls.clear()

        def resume(x):
            calls.append(tuple(x))
            return hook(x)

        res = run_campaign(ccfg, out_dir=out, simulate_fn=resume)
        assert res.cache_hits == 2
        assert res.runs_executed == len(calls) == res.xi.shape[0] - 2

        fresh = run_campaign(ccfg, out_dir=str(tmp_path / "fresh"),
                             simulate_fn=resume)
        np.testing.assert_array_equal(
            res.models["solidification_time"].coeffs,
            fresh.models["solidification_time"].coeffs)

    def test_stale_cache_entry_recomputed(self, bar_mesh_path, tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))
        out = str(tmp_path / "c")
        run_campaign(ccfg, out_dir=out,
                     simulate_fn=lambda x: {n: 2.0 for n in ccfg.outputs})
        victim = sorted(glob.glob(
            os.path.join(out, "samples", "sample_*.json")))[0]
        payload = json.load(open(victim))
        payload["x"][0] += 0.5
        json.dump(payload, open(victim, "w"))

        count = []

        def simulate(x):
            count.append(1)
            return {n: 2.0 for n in ccfg.outputs}

        res = run_campaign(ccfg, out_dir=out, simulate_fn=simulate)
        assert len(count) == 1
        assert res.cache_hits == res.xi.shape[0] - 1


class TestTraceModels:
    def test_envelope_models_when_time_axes_align(self, bar_mesh_path,
                                                  tmp_path):
        text = campaign_text(bar_mesh_path).replace(
            "stop_at_full_solidification = true\n", "")
        text = text.replace("end_time = 120 s", "end_time = 0.5 s")
        text = text.replace("outputs = solidification_time max_sdas",
                            "outputs = max_temperature")
        ccfg = build_campaign_config(parse_config_text(text))
        out = str(tmp_path / "c")
        res = run_campaign(ccfg, out_dir=out)
        assert set(res.trace_models) == {"cold", "hot"}
        indices, coeffs = res.trace_models["cold"]
        assert coeffs.shape == (len(indices), len(res.trace_times))
        assert os.path.exists(os.path.join(out, "probe_envelopes.csv"))
        # the mean trace cools from the initial temperature
        assert coeffs[0, 0] > coeffs[0, -1]

    def test_no_trace_models_when_lengths_differ(self, bar_mesh_path,
                                                 tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))
        res = run_campaign(ccfg, out_dir=str(tmp_path / "c"), workers=2)
        assert res.trace_models == {}
        assert res.sobol["solidification_time"][2]


class TestParallel:
    def test_workers_match_serial(self, bar_mesh_path, tmp_path):
        text = campaign_text(bar_mesh_path).replace(
            "stop_at_full_solidification = true\n", "")
        text = text.replace("end_time = 120 s", "end_time = 0.4 s")
        text = text.replace("outputs = solidification_time max_sdas",
                            "outputs = max_temperature")
        ccfg = build_campaign_config(parse_config_text(text))
        serial = run_campaign(ccfg, out_dir=str(tmp_path / "s"), workers=1)
        parallel = run_campaign(ccfg, out_dir=str(tmp_path / "p"), workers=2)
        np.testing.assert_array_equal(
            serial.models["max_temperature"].coeffs,
            parallel.models["max_temperature"].coeffs)
        np.testing.assert_array_equal(serial.outputs["max_temperature"],
                                      parallel.outputs["max_temperature"])


class TestCampaignOutputs:
    def test_file_inventory(self, bar_mesh_path, tmp_path):
        ccfg = build_campaign_config(
            parse_config_text(campaign_text(bar_mesh_path)))
        means, sds = input_scales(ccfg)
        out = str(tmp_path / "c")
        run_campaign(ccfg, out_dir=out,
                     simulate_fn=oracle_hook(np.array([1.0, 2.0]),
                                             means, sds))
        for name in ("samples.csv", "sobol.csv", "sobol.png",
                     "output_means.txt", "model_solidification_time.pce",
                     "model_max_sdas.pce", "response_solidification_time.csv",
                     "response_solidification_time.png"):
            assert os.path.exists(os.path.join(out, name)), name
        lines = open(os.path.join(out, "samples.csv")).read().splitlines()
        assert len(lines) == 1 + 5
