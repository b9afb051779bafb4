"""The finite-difference harness itself: clean passes, the mutation
control, and per-op coverage on multiple random shapes."""

import numpy as np
import pytest

from seqseg import gradcheck, ops
from seqseg.tensor import Tensor


def test_linear_model_near_machine_precision(rng):
    w = Tensor(rng.standard_normal((4, 4)), dtype="float64", requires_grad=True)
    x = Tensor(rng.standard_normal((4, 4)), dtype="float64")
    report = gradcheck.grad_check(lambda: ops.sum_all(ops.hadamard(w, x)), {"w": w}, rng=rng)
    assert report.passed
    assert report.max_rel_error < 1e-10


def test_rejects_float32_parameters(rng):
    w = Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        gradcheck.grad_check(lambda: ops.sum_all(w), {"w": w})


def test_subsamples_large_parameters(rng):
    w = Tensor(rng.standard_normal((40, 40)), dtype="float64", requires_grad=True)
    report = gradcheck.grad_check(lambda: ops.sum_all(ops.hadamard(w, w)), {"w": w},
                                  rng=rng, max_elements=50)
    assert report.entries[0].checked_elements == 50
    assert report.passed


def test_negated_backward_rule_is_caught(rng, monkeypatch):
    # Mutation control: corrupt tanh's backward rule and expect a loud failure.
    monkeypatch.setattr(ops, "_d_tanh", lambda out: -(1.0 - out * out))
    x = Tensor(rng.standard_normal((3, 3)), dtype="float64", requires_grad=True)
    probe = Tensor(rng.standard_normal((3, 3)), dtype="float64")
    report = gradcheck.grad_check(
        lambda: ops.sum_all(ops.hadamard(ops.tanh(x), probe)), {"x": x}, rng=rng)
    assert not report.passed
    assert report.max_rel_error > 0.5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_operator_passes_on_random_shapes(seed):
    reports = gradcheck.check_ops(np.random.default_rng(seed))
    failing = {name: r.max_rel_error for name, r in reports.items() if not r.passed}
    assert not failing, f"gradcheck failures: {failing}"


def test_unused_parameter_reports_zero_gradient(rng):
    used = Tensor(rng.standard_normal(3), dtype="float64", requires_grad=True)
    unused = Tensor(rng.standard_normal(3), dtype="float64", requires_grad=True)
    report = gradcheck.grad_check(lambda: ops.sum_all(used), {"used": used, "unused": unused},
                                  rng=rng)
    assert report.passed
    by_name = {e.name: e for e in report.entries}
    assert by_name["unused"].analytic == 0.0
