from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadadapt import numerics as nx
from quadadapt.adapter import (
    Adapter, AdapterConfig, SparsityMask, adapter_param_count, attach,
    budget_matched_linear_rank, kernel_adapter_forward, linear_adapter_forward, merge_report,
    quadratic_adapter_forward,
)
from quadadapt.basemodel import BaseModel
from quadadapt.errors import (
    EmptyMask, FrozenParameterError, InvalidConfig, UnknownAttachPoint, WidthMismatch,
)
from quadadapt.numerics import Tensor, backward
from quadadapt.quadratic import KernelMap, LowRankQuadraticTerm


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), grad)


def rand_term(rng, n=5, m=3, r=4):
    return LowRankQuadraticTerm(T(rng.uniform(-2, 2, (r, n))), T(rng.uniform(-2, 2, (r, n))),
                                T(rng.uniform(-2, 2, (m, r))))


def test_linear_adapter_examples():
    rng = np.random.default_rng(0)
    x = T(rng.standard_normal((4, 3)))
    assert not linear_adapter_forward(T(rng.standard_normal((2, 3))), T(np.zeros((5, 2))), x).data.any()
    assert linear_adapter_forward(T([[1, 0]]), T([[2]]), T([3, 7])).data.tolist() == [6.0]


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 2**31))
def test_linear_adapter_homogeneous(a, seed):
    rng = np.random.default_rng(seed)
    A, Bup, x = T(rng.standard_normal((2, 4))), T(rng.standard_normal((3, 2))), rng.standard_normal(4)
    np.testing.assert_allclose(linear_adapter_forward(A, Bup, T(a * x)).data,
                               a * linear_adapter_forward(A, Bup, T(x)).data, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 2**31))
def test_quadratic_adapter_homogeneous(a, seed):
    rng = np.random.default_rng(seed)
    tm, x = rand_term(rng), rng.uniform(-2, 2, 5)
    np.testing.assert_allclose(quadratic_adapter_forward(tm, None, T(a * x)).data,
                               a * a * quadratic_adapter_forward(tm, None, T(x)).data,
                               atol=1e-9, rtol=1e-9)


def test_all_ones_mask_is_exact_noop():
    rng = np.random.default_rng(1)
    tm, x = rand_term(rng), T(rng.standard_normal((6, 5)))
    np.testing.assert_array_equal(quadratic_adapter_forward(tm, SparsityMask.dense([1] * 4), x).data,
                                  quadratic_adapter_forward(tm, None, x).data)


def test_masked_channel_annihilated():
    rng = np.random.default_rng(2)
    a = T(rng.standard_normal((2, 3)), True)
    b = T(rng.standard_normal((2, 3)), True)
    c = T(rng.standard_normal((2, 2)), True)
    x = T(rng.standard_normal((5, 3)))
    mask = SparsityMask.dense([1, 0])
    out = quadratic_adapter_forward(LowRankQuadraticTerm(a, b, c), mask, x)
    only_first = LowRankQuadraticTerm(T(a.data[:1]), T(b.data[:1]), T(c.data[:, :1]))
    np.testing.assert_allclose(out.data, quadratic_adapter_forward(only_first, None, x).data, atol=1e-14)
    backward(nx.sum_all(out))
    assert not a.grad[1].any() and not b.grad[1].any() and not c.grad[:, 1].any()


def test_strided_mask_and_empty():
    np.testing.assert_array_equal(SparsityMask.strided(2).vector(5), [1, 0, 1, 0, 1])
    with pytest.raises(EmptyMask):
        SparsityMask.dense([0, 0])
    with pytest.raises(InvalidConfig):
        SparsityMask.dense([1, 0.5])


def test_kernel_product_equals_quadratic_bitwise():
    rng = np.random.default_rng(3)
    tm, x = rand_term(rng), T(rng.standard_normal((8, 5)))
    for mask in (None, SparsityMask.dense([1, 0, 1, 1])):
        np.testing.assert_array_equal(kernel_adapter_forward(tm, KernelMap.product(), mask, x).data,
                                      quadratic_adapter_forward(tm, mask, x).data)


@pytest.mark.parametrize("kmap", [KernelMap.rbf(0.8), KernelMap.sigmoid(1.5, 0.3)])
def test_bounded_kernels(kmap):
    rng = np.random.default_rng(4)
    for _ in range(50):
        tm, x = rand_term(rng), T(rng.uniform(-2, 2, (4, 5)))
        out = kernel_adapter_forward(tm, kmap, None, x).data
        bound = np.abs(tm.C.data).sum(axis=1)
        assert np.all(np.abs(out) <= bound + 1e-12)


def test_config_validation_and_roundtrip():
    with pytest.raises(InvalidConfig):
        AdapterConfig("cubic", 2)
    with pytest.raises(InvalidConfig):
        AdapterConfig("quadratic", 0)
    with pytest.raises(InvalidConfig):
        AdapterConfig("linear", 2, mask=SparsityMask.dense([1, 1]))
    with pytest.raises(InvalidConfig):
        AdapterConfig("quadratic", 2, alpha=float("inf"))
    cfg = AdapterConfig("kernel_quadratic", 3, KernelMap.rbf(0.2), alpha=0.5,
                        mask=SparsityMask.strided(2), attach_points=["fc0", "fc1"])
    assert AdapterConfig.from_dict(cfg.to_dict()) == cfg
    assert AdapterConfig("kernel_quadratic", 2).kernel == KernelMap.product()


def test_budget_matched_rank():
    r, n, m = 2, 8, 8
    lr = budget_matched_linear_rank(r, n, m)
    assert lr == 3
    assert adapter_param_count("linear", n, m, lr) >= adapter_param_count("quadratic", n, m, r)
    assert adapter_param_count("linear", n, m, lr - 1) < adapter_param_count("quadratic", n, m, r)


# ---- attachment

def mlp64(rng=None):
    return BaseModel.mlp(64, 64, hidden=[64], rng=rng or np.random.default_rng(0))


@pytest.mark.parametrize("family,kernel", [("quadratic", None), ("linear", None),
                                           ("kernel_quadratic", KernelMap.sigmoid(1.0, 0.2))])
def test_fresh_attach_is_bitwise_noop(family, kernel):
    rng = np.random.default_rng(5)
    base = BaseModel.mlp(6, 4, hidden=[5], rng=rng)
    x = T(rng.uniform(-2, 2, (50, 6)))
    before = base(x).data.copy()
    model = attach(base, AdapterConfig(family, 3, kernel, attach_points=["fc0", "fc1"]), rng)
    np.testing.assert_array_equal(model(x).data, before)


def test_alpha_zero_is_noop_even_after_training_values():
    rng = np.random.default_rng(6)
    base = BaseModel.mlp(4, 3, rng=rng)
    x = T(rng.uniform(-2, 2, (10, 4)))
    before = base(x).data.copy()
    model = attach(base, AdapterConfig("quadratic", 2, alpha=0.0), rng)
    model.adapters["fc0"].params["C"].assign(rng.standard_normal((3, 2)))
    np.testing.assert_array_equal(model(x).data, before)


def test_conv_attach_noop():
    rng = np.random.default_rng(7)
    base = BaseModel.convnext(channels=4, blocks=2, rng=rng)
    x = T(rng.uniform(-2, 2, (2, 4, 8, 8)))
    before = base(x).data.copy()
    model = attach(base, AdapterConfig("kernel_quadratic", 4, KernelMap.rbf(0.5),
                                       attach_points=["block0.dw", "block1.dw"]), rng)
    np.testing.assert_array_equal(model(x).data, before)


def test_conv_rank_must_match_channels():
    base = BaseModel.convnext(channels=4, blocks=1, rng=np.random.default_rng(0))
    with pytest.raises(WidthMismatch):
        attach(base, AdapterConfig("quadratic", 3, attach_points=["block0.dw"]))


def test_trainable_set_excludes_base():
    rng = np.random.default_rng(8)
    base = mlp64(rng)
    model = attach(base, AdapterConfig("quadratic", 4, attach_points=["fc0", "fc1"]), rng)
    params = model.trainable_parameters()
    assert sum(p.size for p in params.values()) == model.adapter_param_count() == 1536
    assert {k.split("/")[0] for k in params} == {"fc0", "fc1"}
    base_ids = {id(p) for p in base.params.values()}
    assert not base_ids & {id(p) for p in params.values()}
    with pytest.raises(FrozenParameterError):
        base.trainable_parameters()


def test_trainable_fraction_examples():
    base = mlp64()
    assert merge_report(base).trainable_fraction == 0.0
    rep = merge_report(attach(base, AdapterConfig("quadratic", 4, attach_points=["fc0", "fc1"])))
    assert (rep.base_params, rep.adapter_params) == (8320, 1536)
    assert rep.trainable_fraction == 1536 / (8320 + 1536)
    assert abs(rep.trainable_fraction - 0.156) < 5e-4
    rep1 = merge_report(attach(mlp64(), AdapterConfig("quadratic", 1, attach_points=["fc0"])))
    assert rep1.adapter_params == 192
    assert rep1.trainable_fraction == 192 / 8512


def test_unknown_attach_point_and_width_declaration():
    base = BaseModel.mlp(4, 3, rng=np.random.default_rng(0))
    with pytest.raises(UnknownAttachPoint) as exc:
        attach(base, AdapterConfig("quadratic", 2, attach_points=["fc7"]))
    assert "fc7" in str(exc.value)
    with pytest.raises(WidthMismatch) as exc:
        attach(BaseModel.mlp(4, 3, rng=np.random.default_rng(0)),
               AdapterConfig("quadratic", 2, in_dim=5))
    assert "fc0" in str(exc.value)


def test_given_adapter_width_checked():
    base = BaseModel.mlp(4, 3, rng=np.random.default_rng(0))
    wrong = Adapter.create(AdapterConfig("quadratic", 2), 5, 3)
    with pytest.raises(WidthMismatch):
        attach(base, AdapterConfig("quadratic", 2), adapters=OrderedDict(fc0=wrong))
