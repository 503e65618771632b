import numpy as np
import pytest

from quadadapt import gradsuite
from quadadapt import numerics as nx
from quadadapt.gradsuite import CASES, TOL, check_args, run_case, run_suite
from quadadapt.numerics import Tensor

FAST = [name for name in CASES if "convnext" not in name]


@pytest.mark.parametrize("name", FAST)
def test_case_passes_short(name):
    res = run_case(name, probes=10, seed=3)
    assert res.passed, (name, res.max_error)


def test_suite_covers_every_op():
    ops = {"matmul", "hadamard", "add_broadcast", "linear", "layer_norm", "gelu", "relu", "tanh", "exp",
           "conv2d_depthwise", "mse", "softmax_xent", "full_quadratic", "lowrank_quadratic",
           "linear_adapter", "quadratic_adapter_masked", "mlp_forward", "convnext_2block"}
    assert ops <= set(CASES)
    assert {n for n in CASES if n.startswith("kernel_")} >= {
        "kernel_product", "kernel_polynomial_d3", "kernel_rbf", "kernel_sigmoid"}


def test_checker_catches_wrong_gradient():
    # a deliberately broken backward must be flagged
    def bad_square(t):
        out = nx._record(t.data ** 2, (t,), lambda g: (g * 3.0 * t.data,), "bad")
        return nx.sum_all(out)
    err = check_args(bad_square, [np.array([0.5, -1.5, 2.0])], None)
    assert err > TOL


def test_log_format():
    lines = []
    run_suite(probes=1, names=["matmul"], log=lines.append)
    assert lines[0].startswith("PASS matmul") and "max_rel_err=" in lines[0]


def test_convnext_case_smoke():
    assert run_case("convnext_2block", probes=2, seed=11).passed


def test_screen_cannot_hide_dead_backward(monkeypatch):
    # gradient identically zero: every probe is unresolvable
    def dead(rng):
        return (lambda x: nx.sum_all(nx.scale(x, 0.0))), [rng.uniform(-2, 2, 3)]
    monkeypatch.setitem(gradsuite.CASES, "convnext_2block", dead)
    res = run_case("convnext_2block", probes=6, seed=0)
    assert not res.passed and res.redraws > 3
