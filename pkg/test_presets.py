#!/usr/bin/env python3
"""
Tests for presets, target generation, run configuration and benchmark metrics
"""
import sys

import numpy as np

from schemas import ProblemPreset
from services.exceptions import ConfigError
from services.fea_service import Material, constitutive_matrix, node_id, solve_structure
from services.homogenization_service import UnitCell, homogenize
from services.preset_service import (
    band_mask,
    base_cell_raster,
    build_problem,
    get_preset,
    list_presets,
    make_target,
    target_mask,
    volume_targets,
)
from services.run_service import (
    config_hash,
    delta_metric,
    delta_normalized,
    parse_run_config,
    percent_hs_report,
    resolve_preset,
    rmse,
)


def _with(name: str, **changes) -> ProblemPreset:
    record = get_preset(name).model_dump()
    record.update(changes)
    return ProblemPreset.model_validate(record)


def test_all_presets_are_available():
    assert set(list_presets()) == {"bump", "stretch", "npr_a", "npr_b", "cloak", "tank", "bulk_bench"}
    for name in list_presets():
        assert get_preset(name).name == name


def test_unknown_preset_is_a_config_error():
    try:
        get_preset("bridge")
    except ConfigError as e:
        assert e.field_path == "preset"
        return
    raise AssertionError("unknown preset should be rejected")


def test_bump_problem_layout():
    problem = build_problem(get_preset("bump"))
    assert problem.nel == (12, 4)
    assert problem.fixed_dofs.size == 20
    assert problem.loads[2 * node_id((12, 4), 6, 0) + 1] == 1.0
    assert problem.loads.sum() == 1.0


def test_profile_target_is_a_raised_cosine():
    target = make_target(get_preset("bump"))
    nel = (12, 4)
    top_y = lambda i: target[2 * node_id(nel, i, 4) + 1]
    assert np.isclose(top_y(6), 2.0)
    assert np.isclose(top_y(4), 0.5)
    assert top_y(3) == 0.0 and top_y(9) == 0.0
    assert np.all(target[0::2] == 0.0)


def test_material_target_is_a_homogeneous_solve():
    preset = get_preset("npr_a")
    problem = build_problem(preset)
    expected = solve_structure(problem, np.repeat(constitutive_matrix(Material(0.1, -0.3))[None], 16, axis=0)).u
    assert np.allclose(make_target(preset), expected)


def test_solid_base_cell_target_matches_solid_solve():
    preset = _with("cloak", base_cell={"kind": "solid", "bar_width": 0.2})
    problem = build_problem(preset)
    problem.passive_void = None
    expected = solve_structure(problem, np.repeat(constitutive_matrix(Material())[None], 100, axis=0)).u
    assert np.allclose(make_target(preset), expected, rtol=1e-7, atol=1e-10)


def test_target_mask_excludes_constrained_dofs():
    preset = get_preset("npr_a")
    problem = build_problem(preset)
    mask = target_mask(preset, problem)
    assert not mask[problem.constrained_dofs].any()
    assert mask.sum() == problem.n_dofs - problem.constrained_dofs.size


def test_preset_without_target():
    try:
        make_target(get_preset("tank"))
    except ConfigError:
        return
    raise AssertionError("tank has no displacement target")


def test_volume_ramp_and_band():
    targets = volume_targets(get_preset("bulk_bench"))
    assert np.allclose(targets, np.linspace(0.4, 0.7, 8))
    band = band_mask(get_preset("cloak"))
    assert band.sum() == 36
    assert band_mask(get_preset("bump")) is None


def test_frame_cross_base_cell():
    raster = base_cell_raster(get_preset("cloak").base_cell, (20, 20))
    assert raster.shape == (20, 20)
    assert np.array_equal(raster, raster.T)
    assert np.array_equal(raster, raster[::-1])
    assert raster[0, 0] == 1.0 and raster[10, 10] == 1.0 and raster[5, 5] == 0.0


def test_delta_metric_as_printed():
    assert delta_metric([1.0, 1.0], [1.0, 1.0]) == 0.0
    assert np.isclose(delta_metric([1.0, 1.0], [1.0, 0.0]), 1.0)
    assert np.isclose(delta_normalized([1.0, 1.0], [1.0, 0.0]), 1.0)
    assert np.isclose(delta_metric([0.0, 0.0], [2.0, 0.0]), 0.5)
    try:
        delta_metric([1.0], [0.0])
    except ValueError:
        return
    raise AssertionError("zero target should be rejected")


def test_rmse_metric():
    u = np.array([1.0, 2.0, 3.0])
    assert rmse(u, u, np.ones(3, dtype=bool)) == 0.0
    assert np.isclose(rmse(u, np.zeros(3), np.array([True, False, True])), np.sqrt(5.0))
    try:
        rmse(u, u, np.zeros(3, dtype=bool))
    except ValueError:
        return
    raise AssertionError("empty mask should be rejected")


def test_percent_hs_of_solid_cell():
    tensor = homogenize(UnitCell(np.ones((6, 6)))).tensor
    per_cell, mean = percent_hs_report([tensor], [1.0])
    assert np.isclose(per_cell[0], 100.0, atol=1e-6)
    assert np.isclose(mean, 100.0, atol=1e-6)


def test_run_config_errors_carry_field_paths():
    try:
        parse_run_config({"preset": "bump", "train": {"epochs": 0}})
    except ConfigError as e:
        assert e.field_path == "train.epochs"
    else:
        raise AssertionError("epochs=0 should be rejected")
    try:
        resolve_preset(parse_run_config({"preset": "bump", "overrides": {"colour": "red"}}))
    except ConfigError as e:
        assert e.field_path == "overrides"
    else:
        raise AssertionError("unknown override should be rejected")


def test_overrides_are_validated_and_hashed():
    config = parse_run_config({"preset": "bump", "overrides": {"macro_dims": [4, 2], "micro_dims": [6, 6]}})
    preset = resolve_preset(config)
    assert preset.macro_dims == (4, 2)
    other = parse_run_config({"preset": "bump", "overrides": {"macro_dims": [4, 2], "micro_dims": [6, 6]},
                              "train": {"seed": 1}})
    assert config_hash(config) == config_hash(parse_run_config(config.model_dump(mode="json")))
    assert config_hash(config) != config_hash(other)


if __name__ == "__main__":
    print("🧪 Preset and metric tests")
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_") and callable(v)]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"   ✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"   ❌ {test.__name__}: {e}")
    sys.exit(1 if failed else 0)
