import math
from collections import OrderedDict

import numpy as np
import pytest

from quadadapt import numerics as nx
from quadadapt.adapter import AdapterConfig
from quadadapt.basemodel import BaseModel
from quadadapt.errors import Diverged, InvalidConfig
from quadadapt.harness import (
    TrainConfig, adapt, base_bytes, compare, evaluate, optimize, pretrain, scratch_vs_adapt,
    train,
)
from quadadapt.numerics import Tensor
from quadadapt.quadratic import KernelMap
from quadadapt.shiftbench import generate

FAST = {"optimizer": {"kind": "adam", "lr": 0.01}, "batch_size": 64}


def bowl(w):
    d = nx.sub(w, Tensor([3.0]))
    return nx.sum_all(nx.hadamard(d, d))


def test_sgd_bowl_closed_form():
    w = Tensor([0.0], True)
    optimize({"w": w}, lambda: bowl(w), {"kind": "sgd", "lr": 0.1}, 100)
    assert abs(w.data[0] - 3.0) < 1e-6
    assert abs(w.data[0] - 3.0 * (1 - 0.8 ** 100)) < 1e-12


def test_adam_bowl():
    w = Tensor([0.0], True)
    optimize({"w": w}, lambda: bowl(w), {"kind": "adam", "lr": 0.1}, 500)
    assert abs(w.data[0] - 3.0) < 1e-3


def test_lr_zero_changes_nothing():
    bench = generate(pretrain_size=256, train_size=256, test_size=256)
    model = BaseModel.mlp(8, 8, rng=np.random.default_rng(0))
    before = base_bytes(model)
    rep = train(model, bench.data("pretrain"), TrainConfig({"kind": "sgd", "lr": 0.0}, epochs=4))
    assert base_bytes(model) == before
    assert len(set(rep.test_curve)) == 1
    assert len(set(rep.train_curve)) == 1


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig({"kind": "rmsprop", "lr": 0.1})
    with pytest.raises(InvalidConfig):
        TrainConfig({"kind": "sgd", "lr": -1.0})
    with pytest.raises(InvalidConfig):
        TrainConfig({"kind": "sgd", "lr": 0.1, "beta1": 0.9})
    with pytest.raises(InvalidConfig):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidConfig):
        TrainConfig.from_dict({"epochs": 2, "lr": 0.1})
    tc = TrainConfig(early_stop=(3, 1e-6))
    assert TrainConfig.from_dict(tc.to_dict()) == tc


def test_divergence_reports_partial():
    bench = generate(pretrain_size=128, train_size=128, test_size=128)
    model = BaseModel.mlp(8, 8, rng=np.random.default_rng(0))
    with pytest.raises(Diverged) as exc:
        train(model, bench.data("pretrain"), TrainConfig({"kind": "sgd", "lr": 1e200}, epochs=5))
    rep = exc.value.report
    assert rep.diverged and rep.updates >= 1 and rep.hash


def test_early_stop():
    bench = generate(pretrain_size=256, train_size=256, test_size=256)
    model = BaseModel.mlp(8, 8, rng=np.random.default_rng(0))
    rep = train(model, bench.data("pretrain"),
                TrainConfig({"kind": "sgd", "lr": 0.0}, epochs=50, early_stop=(2, 0.0)))
    assert rep.epochs_completed == 3


def test_report_hash_excludes_wall_clock():
    bench = generate(pretrain_size=256, train_size=256, test_size=256)
    reps = []
    for _ in range(2):
        model = BaseModel.mlp(8, 8, rng=np.random.default_rng(0))
        reps.append(train(model, bench.data("pretrain"), TrainConfig(**FAST, epochs=2)))
    assert reps[0].hash == reps[1].hash
    reps[1].wall_clock += 5.0
    assert reps[0].hash == reps[1].seal().hash
    d = reps[0].to_dict()
    assert {"wall_clock", "hash", "updates_per_epoch", "train_curve"} <= set(d)


@pytest.fixture(scope="module")
def small():
    bench = generate(pretrain_size=1024, train_size=1024, test_size=1024)
    base, _ = pretrain(bench, TrainConfig(**FAST, epochs=15, seed=0))
    return bench, base


def test_adapt_freezes_base(small):
    bench, base = small
    before = base_bytes(base)
    rep, model = adapt(base, bench, AdapterConfig("quadratic", 2), TrainConfig(**FAST, epochs=3))
    assert base_bytes(base) == before == base_bytes(model.base)
    assert rep.trainable_params == 48
    assert rep.updates == 3 * math.ceil(1024 / 64)


def test_adapt_from_checkpoint(small, tmp_path):
    from quadadapt.checkpoint import save_checkpoint

    bench, base = small
    save_checkpoint(base, tmp_path / "base")
    raw = (tmp_path / "base" / "weights.bin").read_bytes()
    r1, _ = adapt(tmp_path / "base", bench, AdapterConfig("quadratic", 2), TrainConfig(**FAST, epochs=2))
    r2, _ = adapt(base, bench, AdapterConfig("quadratic", 2), TrainConfig(**FAST, epochs=2))
    assert (tmp_path / "base" / "weights.bin").read_bytes() == raw
    assert r1.hash == r2.hash


def test_compare_rows_reorder_invariant(small):
    bench, base = small
    cfgs = [AdapterConfig("quadratic", 2), AdapterConfig("linear", 3),
            AdapterConfig("kernel_quadratic", 2, KernelMap.product())]
    tc = TrainConfig(**FAST, epochs=2)
    t1 = compare(bench, cfgs, tc, base=base, seeds=(1, 2))
    t2 = compare(bench, cfgs[::-1], tc, base=base, seeds=(1, 2))
    for row in t1.rows:
        other = t2.row(row.label)
        assert other.seed_hashes == row.seed_hashes
        assert other.final_test_loss == row.final_test_loss
    q, k = t1.row("quadratic/r2/-"), t1.row("kernel_quadratic/r2/product")
    assert q.seed_losses == k.seed_losses
    with pytest.raises(InvalidConfig):
        compare(bench, cfgs[:1], tc, base=base)


def test_null_shift_control():
    bench = generate(shift_strength=0.0, pretrain_size=2048, train_size=2048, test_size=2048)
    base, _ = pretrain(bench, TrainConfig({"kind": "adam", "lr": 0.003}, epochs=30, seed=0))
    table = compare(bench, [AdapterConfig("quadratic", 2), AdapterConfig("linear", 3)],
                    TrainConfig({"kind": "adam", "lr": 0.003}, epochs=3), base=base, seeds=(1,))
    for row in table.rows:
        assert row.final_test_loss <= 2 * bench.sigma ** 2


def test_savings_zero_epochs_flags_unreached(small):
    bench, base = small
    rep = scratch_vs_adapt(bench, TrainConfig(**FAST, epochs=2), base=base,
                           scratch_cfg=TrainConfig(**FAST, epochs=0))
    assert "scratch" in rep.target_unreached
    assert rep.ratio == math.inf


def test_savings_trivial_bench_finite():
    bench = generate(shift_strength=0.0, noise=0.0, pretrain_size=1024, train_size=1024, test_size=1024)
    tc = TrainConfig({"kind": "adam", "lr": 0.01}, epochs=60)
    base, _ = pretrain(bench, TrainConfig({"kind": "adam", "lr": 0.01}, epochs=60, seed=0))
    rep = scratch_vs_adapt(bench, tc, base=base)
    assert rep.target_unreached == []
    assert math.isfinite(rep.ratio)


def test_evaluate_matches_direct(small):
    bench, base = small
    x, y = bench.splits["downstream_test"]
    direct = float(np.mean((base(x).data - y) ** 2))
    assert abs(evaluate(base, x, y, batch=100) - direct) < 1e-12
