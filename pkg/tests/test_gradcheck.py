import numpy as np
import pytest
import torch

from decoar2 import core
from decoar2.gradcheck import CASES, TOLERANCE, CheckResult, run_check


class _WrongSquare(torch.autograd.Function):
    """x**2 with a backward that is off by 1%."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.02 * x


def test_oracle_detects_a_wrong_backward():
    x = torch.randn(6, dtype=torch.float64, requires_grad=True)
    errs = core.gradient_error(lambda: _WrongSquare.apply(x).sum(), {"x": x}, max_entries=None)
    assert errs["x"] > 5e-3


def test_oracle_accepts_a_correct_backward():
    x = torch.randn(6, dtype=torch.float64, requires_grad=True)
    errs = core.gradient_error(lambda: (x * x).sum(), {"x": x}, max_entries=None)
    assert errs["x"] < 1e-9


@pytest.mark.parametrize("op", sorted(CASES))
def test_each_op_passes_on_two_instances(op):
    res = run_check(op, instances=2, max_entries=16)
    assert res.passed, res


def test_cases_are_deterministic():
    a = run_check("attention", instances=1, max_entries=8)
    b = run_check("attention", instances=1, max_entries=8)
    assert a == b


def test_unknown_op():
    with pytest.raises(KeyError):
        run_check("nonsense")


def test_result_threshold():
    assert CheckResult("x", 5, TOLERANCE * 0.99, "w").passed
    assert not CheckResult("x", 5, TOLERANCE, "w").passed
