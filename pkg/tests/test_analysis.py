import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linear_chain, single_layer
from quantlab.analysis import (
    PUBLISHED_VALUES,
    byte_accounting_note,
    complexity_forward,
    cost_comparison,
    cost_model,
    counted_macs,
    error_accumulation_bound,
    error_budget,
    experiment_report,
    mlp_macs_estimate,
    size_report,
    validate_report,
    verify_accumulation,
)
from quantlab.errors import DomainError, UnsupportedStructureError
from quantlab.nn import build_mlp
from quantlab.ptq import PtqConfig, run_ptq
from quantlab.tensor import make_rng


def test_complexity_examples():
    assert complexity_forward(1, 1, 1) == 1.0
    assert complexity_forward(10**7, 1024, 128) == 1.31072e12
    base = complexity_forward(3, 5, 7)
    assert complexity_forward(6, 5, 7) == complexity_forward(3, 10, 7) == complexity_forward(3, 5, 14) == 2 * base
    with pytest.raises(DomainError):
        complexity_forward(0, 1, 1)


def test_cost_model_examples():
    ident = cost_model(32, 32, 32, 32, 7.0)
    assert ident.c_q == 7.0 and ident.reduction_pct == 0.0
    assert cost_model(8, 8, 32, 32, 1.0).c_q == 0.0625
    assert cost_model(4, 4, 32, 32, 1.0).c_q == 0.015625
    assert cost_model(8, 8, 32, 32, 1.0).reduction_pct == 93.75
    assert cost_model(4, 4, 32, 32, 1.0).reduction_pct == 98.4375
    with pytest.raises(DomainError):
        cost_model(0, 8, 32, 32, 1.0)


@pytest.mark.parametrize("dims", [[64, 256, 256, 8], [128, 512, 10], [64, 256, 256, 256, 4]])
def test_counted_macs_drive_cost(dims):
    model = build_mlp(dims, 0)
    batch = np.zeros((5, dims[0]))
    c_f = counted_macs(model, batch)
    assert c_f == 5 * model.weight_count
    assert c_f == pytest.approx(mlp_macs_estimate(model, 5), rel=0.01)
    assert cost_model(8, 8, 32, 32, c_f).c_q == c_f / 16
    assert cost_model(4, 4, 32, 32, c_f).c_q == c_f / 64


def test_cost_comparison_flags_published_values():
    rows = {r["config"]: r for r in cost_comparison(1000.0)}
    assert rows["int8"]["published_reduction_pct"] == 40.0
    assert rows["int4"]["published_reduction_pct"] == 65.0
    assert rows["int8"]["consistent_with_formula"] is False
    assert rows["int4"]["consistent_with_formula"] is False


def test_bound_examples():
    assert error_accumulation_bound([0.3]) == 0.3
    assert error_accumulation_bound([0.1, 0.1]) == pytest.approx(0.21, abs=1e-15)
    assert error_accumulation_bound([]) == 0.0
    with pytest.raises(DomainError):
        error_accumulation_bound([0.1, -0.01])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=8), st.integers(0, 7), st.floats(0, 1))
def test_bound_monotone(eps, i, bump):
    i %= len(eps)
    more = list(eps)
    more[i] += bump
    assert error_accumulation_bound(more) >= error_accumulation_bound(eps)


def test_verify_identical_is_zero():
    # weights on an 8-bit grid survive quantization exactly
    q = make_rng(0).permutation(256).reshape(16, 16)
    model = single_layer(((q - 128) / 128).astype(np.float32))
    qmodel, _ = run_ptq(model, None, PtqConfig(bits=8))
    budget = verify_accumulation(model, qmodel, make_rng(1).standard_normal((5, 16)))
    assert budget.measured_rel_error == 0.0
    assert budget.bound_E_T == 0.0 and budget.holds


def test_single_layer_direct_bound():
    model = linear_chain([12, 9], 4)
    qmodel, _ = run_ptq(model, None, PtqConfig(bits=4))
    budget = verify_accumulation(model, qmodel, make_rng(2).standard_normal((50, 12)))
    assert budget.measured_rel_error <= budget.per_layer_eps[0] + 1e-12
    assert budget.bound_E_T == budget.per_layer_eps[0]


def test_random_chain_sweep_never_violates():
    rng = make_rng(10)
    for trial in range(30):
        depth = int(rng.integers(2, 7))
        dims = [int(d) for d in rng.integers(3, 12, size=depth + 1)]
        model = linear_chain(dims, trial)
        bits = int(rng.choice([4, 8]))
        qmodel, _ = run_ptq(model, None, PtqConfig(bits=bits))
        budget = verify_accumulation(model, qmodel, rng.standard_normal((20, dims[0])))
        assert budget.holds
        assert budget.bound_E_T == pytest.approx(np.prod([1 + e for e in budget.per_layer_eps]) - 1, rel=1e-12)


def test_nonlinear_rejected_and_budget_fallback(tiny_model):
    qmodel, _ = run_ptq(tiny_model, None, PtqConfig(bits=8))
    with pytest.raises(UnsupportedStructureError):
        verify_accumulation(tiny_model, qmodel, np.zeros((1, 6)))
    budget = error_budget(tiny_model, qmodel, np.zeros((1, 6)))
    assert budget.measured_rel_error is None and budget.structure == "nonlinear"
    assert budget.to_dict()["holds"] is None


def test_size_report_int8():
    model = build_mlp([1000, 1000], 0)
    q8, _ = run_ptq(model, None, PtqConfig(bits=8))
    rep = size_report(model, q8)
    assert rep["reduction_pct"] == pytest.approx(75.0, abs=0.1)
    assert rep["alpha"] == rep["quantized"] / rep["original"]
    assert rep["published_reduction_pct"] == PUBLISHED_VALUES["size_reduction_pct"]


def test_byte_accounting_note(tiny_model):
    note = byte_accounting_note(tiny_model)
    assert note["published_small_bytes_per_param"] == pytest.approx(22.0)
    assert note["reproducible"] is False


def test_empty_report_is_valid_and_null():
    doc = experiment_report()
    validate_report(doc)
    for key in ("ptq", "training", "allocation", "cost", "error_budget", "size"):
        assert doc[key] is None
    assert doc["report_version"] == 1


def test_report_is_deterministic(tiny_model):
    _, rep = run_ptq(tiny_model, None, PtqConfig(bits=8))
    a = json.dumps(experiment_report(ptq=rep.to_dict()))
    b = json.dumps(experiment_report(ptq=rep.to_dict()))
    assert a == b
    assert list(json.loads(a)) == list(experiment_report())


def test_report_schema_rejects_missing_version():
    doc = experiment_report()
    del doc["report_version"]
    with pytest.raises(jsonschema.ValidationError):
        validate_report(doc)
