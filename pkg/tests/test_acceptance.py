"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import math
import time

import numpy as np
import pytest

from fea_cncd import engine
from fea_cncd import gradsuite
from fea_cncd import losses as L
from fea_cncd.dataio import SessionProtocol, SyntheticSpec, generate_synthetic, split_protocol
from fea_cncd.engine import TrainConfig, run_protocol
from fea_cncd.evalkit import MetricsLedger, avg_discovery, avg_forgetting, dump_metrics, hungarian_assign
from fea_cncd.protomem import PrototypeEntry, sample_pseudo_features
from gate import verdict
from loss_cases import CASES

LN2 = math.log(2.0)


def desk_protocol(separation=8.0, seed=0):
    ds = generate_synthetic(SyntheticSpec(20, 16, 200, 50, within_std=1.0, separation=separation, seed=seed))
    return split_protocol(ds, SessionProtocol(10, [2] * 5))


@pytest.fixture(scope="module")
def desk_run():
    t0 = time.perf_counter()
    result = run_protocol(TrainConfig.desk(seed=0), desk_protocol(), run_id="criterion-6")
    return result, time.perf_counter() - t0


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    reports = gradsuite.run_suite(20, tol=1e-3, step=1e-4)
    elapsed = time.perf_counter() - t0
    print(gradsuite.format_table(reports))
    worst = max(r.max_rel_error for r in reports)
    names = [r.op_name for r in reports]
    ok = (names == list(gradsuite.LOSS_NAMES) and all(r.max_rel_error <= 1e-3 for r in reports)
          and elapsed < 60)
    assert verdict(1, "loss gradients vs central differences", ok,
                   f"10 losses x 20 instances, worst rel {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_scalar_oracles():
    worst = {}
    for i, (name, case) in enumerate(sorted(CASES.items())):
        rng = np.random.default_rng([2, i])
        errs = []
        for _ in range(100):
            lib, ref = case(rng)
            errs.append(abs(lib - ref))
        worst[name] = max(errs)
    ok = len(worst) == 10 and max(worst.values()) <= 1e-9
    assert verdict(2, "loss values vs scalar oracles", ok,
                   f"{len(worst)} losses x 100 instances, worst abs {max(worst.values()):.1e}")


def _brute(cost, perms):
    totals = cost[np.arange(cost.shape[0]), perms].sum(axis=1)
    best = totals.min()
    # permutations are generated in lexicographic order, so the first hit is the smallest
    first = int(np.flatnonzero(totals <= best + 1e-9)[0])
    return perms[first], best


def test_criterion_03_hungarian_optimality():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    mismatches = ties = 0
    for n in range(1, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        for k in range(1000):
            # odd draws use small integer costs so ties are common
            cost = rng.integers(0, 3, (n, n)).astype(float) if k % 2 else rng.uniform(-5, 5, (n, n))
            perm, total = hungarian_assign(cost)
            want, best = _brute(cost, perms)
            ties += k % 2
            if not np.array_equal(perm, want) or abs(total - best) > 1e-9:
                mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    assert verdict(3, "assignment equals lexicographic brute force", ok,
                   f"7000 matrices ({ties} tie-heavy), {mismatches} mismatches, {elapsed:.1f}s")


def test_criterion_04_analytic_points():
    p = np.full((2, 4), 0.25)
    checks = {
        "D_g": L.guide_term(p, p, L.prior_distribution(2, 2)).item() - LN2,
        "L_cl": L.loss_cl([[0.3, -1.2]], [[0.3, -1.2]]).item() - LN2,
        "L_CSS": L.loss_css(np.array([[1.0, 0.0], [0.3, 0.9]]), np.array([[1.0, 2.0]]),
                            np.array([[1.0, 2.0]]), [1]).item() - LN2,
        "L_BAP": L.loss_bap(L.project_prototypes(np.array([[0.2, 0.7]]), np.array([[0.2, 0.7]]),
                                                 np.array([4]), [4])).item() - LN2,
        "alpha(30)": L.warmup_alpha(30, 2.0, 30) - 2.0,
        "alpha(0)": L.warmup_alpha(0, 2.0, 30) - 0.0,
    }
    worst = max(abs(v) for v in checks.values())
    assert verdict(4, "closed-form point values", worst <= 1e-12, f"worst deviation {worst:.1e}")


def test_criterion_05_metric_formulas():
    f1 = avg_forgetting(MetricsLedger.from_matrix([[90.0, np.nan], [80.0, 50.0]]), 1)
    d2 = avg_discovery(MetricsLedger.from_matrix([[95.0, np.nan, np.nan], [90.0, 50.0, np.nan],
                                                  [88.0, 70.0, 60.0]]), 2)
    assert verdict(5, "forgetting and discovery on crafted ledgers", f1 == 10.0 and d2 == 65.0,
                   f"F_1={f1}, D_2={d2}")


def test_criterion_06_end_to_end(desk_run):
    result, elapsed = desk_run
    m = result.metrics
    ok = m["average_accuracy"] >= 90 and m["F_T"] <= 5 and m["D_T"] >= 90 and elapsed < 300
    for row in m["a_matrix"]:
        print(" ".join(f"{a:6.1f}" for a in row))
    assert verdict(6, "synthetic T=5 protocol", ok,
                   f"avg {m['average_accuracy']:.2f}, F_5 {m['F_T']:.2f}, D_5 {m['D_T']:.2f}, {elapsed:.1f}s")


VARIANTS = {
    "framework": dict(use_css=False, use_bap=False),
    "+CSS": dict(use_bap=False),
    "+BAP": dict(use_css=False),
    "full": {},
}


def test_criterion_07_ablation_direction():
    table = {}
    for name, flags in VARIANTS.items():
        accs = [run_protocol(TrainConfig.desk(seed=s, **flags), desk_protocol(3.0, s)).metrics["average_accuracy"]
                for s in range(5)]
        table[name] = accs
    for name, accs in table.items():
        print(f"{name:<10s} " + " ".join(f"{a:6.2f}" for a in accs) + f"   mean {np.mean(accs):6.2f}")
    full, frame = float(np.mean(table["full"])), float(np.mean(table["framework"]))
    summary = ", ".join(f"{k} {np.mean(v):.2f}" for k, v in table.items())
    assert verdict(7, "full >= framework at separation 3 over 5 seeds", full >= frame, summary)


def test_criterion_08_determinism(desk_run):
    first, _ = desk_run
    second = run_protocol(TrainConfig.desk(seed=0), desk_protocol(), run_id="criterion-6")
    a, b = dump_metrics(first.metrics).encode(), dump_metrics(second.metrics).encode()
    assert verdict(8, "repeat run gives byte-identical metrics", a == b, f"{len(a)} bytes")


def test_criterion_09_gradient_flow(monkeypatch):
    seen = {"steps": 0, "max": 0.0}
    original = engine.check_gradient_flow

    def spy(state, ctx):
        seen["steps"] += 1
        grads = [p.grad for p in state.model.teacher.parameters()]
        if ctx.known_mu is not None:
            grads.append(ctx.known_mu.grad)
        seen["max"] = max([seen["max"]] + [float(np.abs(g).max()) for g in grads])
        original(state, ctx)

    monkeypatch.setattr(engine, "check_gradient_flow", spy)
    ds = generate_synthetic(SyntheticSpec(8, 8, 40, 10, seed=9))
    sessions = split_protocol(ds, SessionProtocol(4, [2, 2]))
    # a trainable encoder so the teacher snapshot has parameters to protect
    run_protocol(TrainConfig(encoder_mode="mlp", epochs_base=2, epochs_inc=35, batch_size=32), sessions)
    ok = seen["steps"] > 0 and seen["max"] == 0.0
    assert verdict(9, "no gradient on teacher or stored prototypes", ok,
                   f"{seen['steps']} incremental steps, max |grad| {seen['max']}")


def test_criterion_10_sampling_statistics():
    mu = np.array([0.0, 1.5, -3.0, 10.0, 0.25, -0.7])
    var = np.array([1.0, 4.0, 0.25, 2.0, 9.0, 0.01])
    out = sample_pseudo_features(PrototypeEntry(0, mu, var, 100), 100_000, seed=10)
    mean_err = float(np.abs(out.mean(axis=0) - mu).max())
    var_rel = float(np.abs(out.var(axis=0) / var - 1).max())
    ok = mean_err <= 0.05 and var_rel <= 0.025
    assert verdict(10, "pseudo-feature mean and variance", ok,
                   f"worst mean error {mean_err:.4f}, worst variance error {100 * var_rel:.2f}%")
