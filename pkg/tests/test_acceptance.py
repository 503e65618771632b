"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run under pytest (lines are echoed in the terminal summary) or directly:

    python3 tests/test_acceptance.py
"""
import json
import math
from pathlib import Path

import numpy as np
import pytest

from quadadapt.adapter import AdapterConfig, attach, merge_report
from quadadapt.basemodel import BaseModel
from quadadapt.checkpoint import clone_model, save_checkpoint
from quadadapt.gradsuite import TOL, run_suite
from quadadapt.harness import TrainConfig, adapt, compare, pretrain, scratch_vs_adapt
from quadadapt.numerics import Tensor
from quadadapt.quadratic import (
    KernelMap, LowRankQuadraticTerm, expand_lowrank, full_quadratic_forward, param_count,
    lowrank_quadratic_forward,
)
from quadadapt.shiftbench import BenchConfig, generate, linear_floor_oracle

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RESULTS: list[str] = []


def record(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def load(name):
    return json.loads((CONFIGS / f"{name}.json").read_text())


def adapters_of(cfg):
    out = []
    for d in cfg["adapters"]:
        d = dict(d)
        label = d.pop("label")
        out.append((label, AdapterConfig.from_dict(d)))
    return out


@pytest.fixture(scope="module")
def default():
    cfg = load("default")
    bench = generate(BenchConfig.from_dict(cfg["bench"]))
    base, _ = pretrain(bench, TrainConfig.from_dict(cfg["pretrain"]))
    return cfg, bench, base


@pytest.fixture(scope="module")
def comparison(default):
    cfg, bench, base = default
    pairs = adapters_of(cfg)
    run = lambda: compare(bench, [c for _, c in pairs], TrainConfig.from_dict(cfg["train"]),
                          base=base, seeds=cfg["seeds"], labels=[lab for lab, _ in pairs])
    return run(), run


def test_c01_gradient_suite():
    results = run_suite(probes=100, seed=0)
    worst = max(results, key=lambda r: r.max_error)
    ok = all(r.passed for r in results) and all(r.probes >= 100 for r in results)
    record(1, ok, f"{sum(r.passed for r in results)}/{len(results)} ops below {TOL:g} over 100 probes; "
                  f"worst {worst.name} {worst.max_error:.2e}")


def test_c02_decomposition_exact():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n, m, r = (int(v) for v in (rng.integers(1, 17), rng.integers(1, 9), rng.integers(1, 9)))
        term = LowRankQuadraticTerm(Tensor(rng.uniform(-2, 2, (r, n))), Tensor(rng.uniform(-2, 2, (r, n))),
                                    Tensor(rng.uniform(-2, 2, (m, r))))
        x = Tensor(rng.uniform(-2, 2, (1, n)))
        diff = full_quadratic_forward(expand_lowrank(term), x).data - lowrank_quadratic_forward(term, x).data
        worst = max(worst, float(np.max(np.abs(diff))))
    record(2, worst < 1e-9, f"max |expanded - lowrank| = {worst:.2e} over 100 pairs, n <= 16 (< 1e-9)")


def test_c03_kernel_identity(default):
    cfg, bench, base = default
    tc = TrainConfig.from_dict({**cfg["train"], "epochs": 10})
    rq, mq = adapt(base, bench, AdapterConfig("quadratic", 2), tc)
    rk, mk = adapt(base, bench, AdapterConfig("kernel_quadratic", 2, KernelMap.product()), tc)
    x = bench.splits["downstream_test"][0]
    gap = float(np.max(np.abs(mq(x).data - mk(x).data)))
    ok = gap <= 1e-12 and rq.test_curve == rk.test_curve
    record(3, ok, f"product-kernel vs quadratic after 10 trained epochs: max |diff| = {gap:.1e} (<= 1e-12), "
                  f"curves identical={rq.test_curve == rk.test_curve}")


def test_c04_freeze_integrity(default, tmp_path):
    cfg, bench, base = default
    save_checkpoint(base, tmp_path / "base")
    before = {f: (tmp_path / "base" / f).read_bytes() for f in ("manifest.json", "weights.bin")}
    tc = TrainConfig.from_dict({**cfg["train"], "epochs": 50})
    adapt(tmp_path / "base", bench, AdapterConfig("quadratic", 2), tc)
    after = {f: (tmp_path / "base" / f).read_bytes() for f in before}
    record(4, before == after, "base checkpoint bytes identical after 50 epochs of adapter training")


def test_c05_noop_attachment():
    rng = np.random.default_rng(5)
    ok = True
    for family, kernel in (("linear", None), ("quadratic", None),
                           ("kernel_quadratic", KernelMap.rbf(0.5)), ("kernel_quadratic", KernelMap.sigmoid())):
        base = BaseModel.mlp(8, 8, hidden=[16], rng=rng)
        x = rng.uniform(-1, 1, (256, 8))
        want = base(x).data.tobytes()
        model = attach(clone_model(base), AdapterConfig(family, 2, kernel, attach_points=["fc0", "fc1"]), rng)
        ok &= model(x).data.tobytes() == want
    conv = BaseModel.convnext(channels=8, blocks=2, rng=rng)
    x = rng.uniform(-2, 2, (4, 8, 8, 8))
    want = conv(x).data.tobytes()
    model = attach(clone_model(conv), AdapterConfig("quadratic", 8, attach_points=["block0.dw", "block1.dw"]), rng)
    ok &= model(x).data.tobytes() == want
    record(5, ok, "fresh adapters (4 dense families + conv) leave outputs bitwise unchanged")


def test_c06_shift_separation(default, comparison):
    cfg, bench, _ = default
    table, _ = comparison
    q, lin = table.row("quadratic_r2"), table.row("linear_r3")
    floor, s2 = linear_floor_oracle(bench), bench.sigma ** 2
    ratio = lin.final_test_loss / q.final_test_loss
    ok = q.final_test_loss <= 2 * s2 and lin.final_test_loss >= 0.8 * floor and ratio >= 3 \
        and q.params == lin.params
    record(6, ok, f"median quad MSE {q.final_test_loss:.3e} (<= {2 * s2:.0e}); linear {lin.final_test_loss:.3e} "
                  f"(>= 0.8*floor {0.8 * floor:.3e}); ratio {ratio:.0f}x (>= 3); params {q.params}/{lin.params}")


def test_c07_kernel_gain():
    cfg = load("tanh_warp")
    bench = generate(BenchConfig.from_dict(cfg["bench"]))
    base, _ = pretrain(bench, TrainConfig.from_dict(cfg["pretrain"]))
    pairs = [(lab, c) for lab, c in adapters_of(cfg) if lab in ("product_r2", "sigmoid_r2")]
    table = compare(bench, [c for _, c in pairs], TrainConfig.from_dict(cfg["train"]), base=base,
                    seeds=cfg["seeds"], labels=[lab for lab, _ in pairs])
    prod, sig = table.row("product_r2"), table.row("sigmoid_r2")
    ok = sig.final_test_loss < prod.final_test_loss and sig.params == prod.params
    record(7, ok, f"tanh-warp bench, rank 2: sigmoid median MSE {sig.final_test_loss:.3e} < product "
                  f"{prod.final_test_loss:.3e} (params {sig.params} = {prod.params})")


def test_c08_efficiency(default):
    cfg, bench, base = load("savings"), *default[1:]
    ratios = []
    for seed in (1, 2, 3):
        rep = scratch_vs_adapt(bench, TrainConfig.from_dict({**cfg["train"], "seed": seed}), base=base,
                               adapter_cfg=AdapterConfig.from_dict(cfg["adapter"]),
                               scratch_cfg=TrainConfig.from_dict({**cfg["scratch_train"], "seed": seed}))
        ratios.append(rep.ratio)
    med = float(np.median(ratios))
    record(8, med <= 0.20, f"median parameter-step ratio adapt/scratch = {med:.3f} (<= 0.20); "
                           f"per seed {', '.join(f'{r:.3f}' for r in ratios)}")


def test_c09_accounting():
    cfg = load("mlp64")
    base = BaseModel.mlp(64, 64, hidden=cfg["base"]["hidden"], rng=np.random.default_rng(0))
    model = attach(base, AdapterConfig.from_dict(cfg["adapter"]))
    rep = merge_report(model)
    exact = 1536 / (8320 + 1536)
    brute_base = sum(p.data.size for p in base.params.values())
    brute_ad = sum(p.data.size for p in model.trainable_parameters().values())
    formula_ok = all(param_count(a.term()) == a.param_count() for a in model.adapters.values())
    ok = (rep.base_params, rep.adapter_params) == (8320, 1536) == (brute_base, brute_ad) \
        and rep.trainable_fraction == exact and abs(exact - 0.156) < 5e-4 and formula_ok
    record(9, ok, f"trainable fraction {100 * rep.trainable_fraction:.2f}% (= 1536/9856); "
                  f"brute-force counts {brute_base}/{brute_ad} match formulas")


def test_c10_determinism(comparison):
    table, run = comparison
    again = run()
    same = all(a.seed_hashes == b.seed_hashes for a, b in zip(table.rows, again.rows))
    n = sum(len(r.seed_hashes) for r in table.rows)
    record(10, same, f"{n} TrainReport hashes from criterion 6 reproduced exactly")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
