#!/usr/bin/env python3
"""
Tests for the loss terms and their adjoint gradients
"""
import sys

import numpy as np

from schemas import LossWeights
from services.fea_service import FeProblem, edge_nodes, node_dofs, node_id
from services.homogenization_service import UnitCell, homogenize, sensitivity
from services.objectives_service import (
    LossParts,
    base_cell_l1,
    boundary_loss,
    bulk_objective,
    combine,
    compliance_loss,
    displacement_match_loss,
    evaluate_cells,
    reference_compliance,
    term_coefficients,
    volume_penalty,
)

MACRO = (2, 2)


def _random_rho(seed: int, n_cells: int = 4, shape=(6, 6)) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.2, 0.9, size=(n_cells, *shape))


def _loaded_problem(with_motion: bool = False) -> FeProblem:
    loads = np.zeros(18)
    loads[2 * node_id(MACRO, 2, 2) + 1] = -1.0
    loads[2 * node_id(MACRO, 1, 2)] = 0.5
    kwargs = {}
    if with_motion:
        right = node_dofs(edge_nodes(MACRO, "right")[:2], ("x",))
        kwargs = {"prescribed_dofs": right, "prescribed_values": np.array([0.02, 0.05])}
    return FeProblem(nel=MACRO, fixed_dofs=node_dofs(edge_nodes(MACRO, "left")), loads=loads, **kwargs)


def _check_fd(loss_of, rho: np.ndarray, grad: np.ndarray, picks, rtol=1e-4):
    h = 1e-6
    for idx in picks:
        up, down = rho.copy(), rho.copy()
        up[idx] += h
        down[idx] -= h
        fd = (loss_of(up) - loss_of(down)) / (2 * h)
        assert np.isclose(grad[idx], fd, rtol=rtol, atol=1e-8), f"{idx}: {grad[idx]} vs {fd}"


PICKS = [(0, 0, 0), (1, 2, 3), (2, 5, 1), (3, 4, 4)]


def test_compliance_gradient():
    problem = _loaded_problem()
    c_ref = reference_compliance(problem)
    rho = _random_rho(0)

    def loss_of(r):
        return compliance_loss(evaluate_cells(r, MACRO), problem, c_ref).value

    term = compliance_loss(evaluate_cells(rho, MACRO), problem, c_ref)
    assert term.value >= 1.0
    _check_fd(loss_of, rho, term.grad, PICKS)


def test_compliance_gradient_is_nonpositive_under_fixed_load():
    problem = _loaded_problem()
    c_ref = reference_compliance(problem)
    for seed in range(5):
        term = compliance_loss(evaluate_cells(_random_rho(10 + seed), MACRO), problem, c_ref)
        assert np.all(term.grad <= 1e-12 * np.abs(term.grad).max()), seed


def test_compliance_gradient_with_prescribed_motion():
    problem = _loaded_problem(with_motion=True)
    rho = _random_rho(1)

    def loss_of(r):
        return compliance_loss(evaluate_cells(r, MACRO), problem, 1.0).value

    term = compliance_loss(evaluate_cells(rho, MACRO), problem, 1.0)
    _check_fd(loss_of, rho, term.grad, PICKS)


def test_compliance_needs_reference():
    cells = evaluate_cells(_random_rho(2), MACRO)
    try:
        compliance_loss(cells, _loaded_problem(), None)
    except ValueError:
        return
    raise AssertionError("missing baseline compliance should be rejected")


def test_displacement_match_gradient():
    problem = _loaded_problem(with_motion=True)
    target = np.zeros(problem.n_dofs)
    target[1::2] = -0.5
    mask = np.zeros(problem.n_dofs)
    mask[node_dofs(edge_nodes(MACRO, "top"), ("y",))] = 1.0
    rho = _random_rho(3)

    def loss_of(r):
        return displacement_match_loss(evaluate_cells(r, MACRO), problem, target, mask).value

    term = displacement_match_loss(evaluate_cells(rho, MACRO), problem, target, mask)
    assert term.rmse > 0.0
    assert np.isclose(term.value, 3 * term.rmse ** 2)
    _check_fd(loss_of, rho, term.grad, PICKS)


def test_empty_match_mask_rejected():
    problem = _loaded_problem()
    cells = evaluate_cells(_random_rho(4), MACRO)
    try:
        displacement_match_loss(cells, problem, np.zeros(18), np.zeros(18))
    except ValueError:
        return
    raise AssertionError("empty mask should be rejected")


def test_passive_cells_are_clamped_and_frozen():
    void = np.array([True, False, False, False])
    solid = np.array([False, False, False, True])
    cells = evaluate_cells(_random_rho(5), MACRO, passive_void=void, passive_solid=solid)
    assert np.all(cells.rho[0] == 0.0) and np.all(cells.rho[3] == 1.0)
    grad = cells.chain(np.ones((4, 3, 3)))
    assert np.all(grad[0] == 0.0) and np.all(grad[3] == 0.0)
    assert np.any(grad[1] != 0.0)


def test_volume_penalty_values():
    term = volume_penalty(np.full((1, 4, 4), 0.8), 0.4)
    assert np.isclose(term.value, 1.0)
    rho = _random_rho(6, n_cells=3, shape=(3, 3))
    targets = np.array([0.3, 0.5, 0.7])
    term = volume_penalty(rho, targets)
    _check_fd(lambda r: volume_penalty(r, targets).value, rho, term.grad, [(0, 0, 0), (2, 1, 2)])


def test_boundary_loss_values():
    rho = np.stack([np.ones((3, 3)), np.zeros((3, 3))])
    term = boundary_loss(rho, (2, 1))
    assert np.isclose(term.value, 1.0)
    assert boundary_loss(np.ones((4, 3, 3)), MACRO).value == 0.0
    rho = _random_rho(7, shape=(3, 3))
    term = boundary_loss(rho, MACRO)
    _check_fd(lambda r: boundary_loss(r, MACRO).value, rho, term.grad, [(0, 0, 2), (1, 2, 0), (3, 0, 1)])


def test_boundary_loss_skips_inactive_neighbours():
    rho = np.stack([np.ones((3, 3)), np.zeros((3, 3))])
    term = boundary_loss(rho, (2, 1), active=np.array([True, False]))
    assert term.value == 0.0 and np.all(term.grad == 0.0)


def test_bulk_objective_of_solid_cell():
    cell = UnitCell(np.ones((4, 4)))
    result = homogenize(cell)
    term = bulk_objective(result, sensitivity(cell, result))
    assert np.isclose(term.value, -2.8571, atol=1e-4)
    assert np.isclose(term.normalized, 1.0)


def test_base_cell_l1():
    rho = np.full((2, 2, 2), 0.5)
    term = base_cell_l1(rho, np.ones((2, 2)), np.array([True, False]))
    assert np.isclose(term.value, 0.5)
    assert np.allclose(term.grad[0], -0.25) and np.all(term.grad[1] == 0.0)


def test_term_coefficients_by_mode():
    w = LossWeights(alpha=2.0, alpha_max=10.0, bc_scale=0.1, bulk_multiplier=1.0)
    comp = term_coefficients(w, "compliance", 2.0, 4)
    disp = term_coefficients(w, "displacement", 2.0, 4)
    bulk = term_coefficients(w, "bulk_only", 2.0, 4)
    assert comp["structural"] == 1.0 and comp["bulk"] == 0.0
    assert disp["structural"] == 2.0 and np.isclose(disp["bulk"], -0.25)
    assert bulk["structural"] == 0.0
    assert np.isclose(comp["boundary"], 0.2) and comp["volume"] == 2.0


def test_combine_sums_weighted_parts():
    w = LossWeights()
    parts = LossParts(structural=0.3, bulk=2.0, volume=0.1, boundary=0.2, regularization=4.0,
                      per_cell_volume=[0.4, 0.5], rmse=0.05, n_active=2)
    report = combine(parts, w, "displacement", alpha=3.0, epoch=7)
    expected = 3.0 * 0.3 - 0.5 * 2.0 + 3.0 * 0.1 + 0.1 * 3.0 * 0.2 + 1e-5 * 4.0
    assert np.isclose(report.total, expected)
    assert report.epoch == 7 and report.alpha == 3.0
    total = report.structural + report.bulk + report.volume + report.boundary + report.base_cell + report.regularization
    assert np.isclose(report.total, total)


def test_combine_rejects_missing_parts():
    try:
        combine(LossParts(bulk=1.0), LossWeights(), "displacement")
    except ValueError:
        return
    raise AssertionError("displacement mode without a structural part should be rejected")


if __name__ == "__main__":
    print("🧪 Objective tests")
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
