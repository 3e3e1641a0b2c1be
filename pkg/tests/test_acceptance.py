"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
"""

import csv
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance
from otat.episodes import EpisodeSpec, generate_episode
from otat.gradcheck import assign_flat, flatten_params, grad_check
from otat.harness import acceptance_config, acceptance_suite, fit_seed
from otat.losses import LossWeights, PrototypeBank, eaw_terms, update_prototypes
from otat.network import Arm, DualEncoder, Objective
from otat.transport import Marginals, SinkhornConfig, exact_ot, sinkhorn
from otat.transport.sinkhorn import round_to_polytope


def verdict(number, ok, detail):
    record_acceptance(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    return ok


def random_marginals(rng, n, m):
    a = rng.random(n) + 0.1
    b = rng.random(m) + 0.1
    return Marginals(a / a.sum(), b / b.sum())


def test_01_sinkhorn_feasibility():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, converged = 0.0, 0
    for k in range(100):
        n, m = int(rng.integers(1, 51)), int(rng.integers(1, 21))
        marg = random_marginals(rng, n, m)
        lam = (1.0, 10.0, 50.0)[k % 3]
        res = sinkhorn(rng.random((n, m)), marg, SinkhornConfig(lam=lam, max_iters=1000))
        if res.converged:
            converged += 1
            worst = max(worst, np.abs(res.plan.sum(1) - marg.a).max(), np.abs(res.plan.sum(0) - marg.b).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 5.0 and converged > 0
    assert verdict(1, ok, f"max marginal violation {worst:.2e} over {converged}/100 converged plans, {elapsed:.2f} s")


def test_02_oracle_agreement():
    rng = np.random.default_rng(202)
    gaps, raw_excess, rounded_excess = [], [], []
    for _ in range(50):
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        cost = rng.random((n, m))
        marg = random_marginals(rng, n, m)
        plan = sinkhorn(cost, marg, SinkhornConfig(lam=50.0, max_iters=100_000, tol=1e-12)).plan
        _, exact = exact_ot(cost, marg)
        value = float((plan * cost).sum())
        gaps.append(abs(value - exact))
        raw_excess.append(exact - value)
        rounded_excess.append(exact - float((round_to_polytope(plan, marg) * cost).sum()))
    # the raw plan is feasible only up to the solver tolerance; compare on its polytope rounding
    ok = max(gaps) <= 0.02 and max(rounded_excess) <= 1e-12
    assert verdict(2, ok, f"max |Sinkhorn - exact| {max(gaps):.4f}; exact - rounded Sinkhorn <= {max(rounded_excess):.1e}"
                          f" (raw plan {max(raw_excess):.1e})")


def gradient_setup():
    spec = EpisodeSpec(n_classes=2, shots=2, queries=1, latent_dim=4, dim=8, visual_tokens=5)
    episode = generate_episode(spec, 3)
    net = DualEncoder.build(8, n_blocks=2, cmam_start_layer=2, rank=3, seed=1, adapter_init="random")
    obj = Objective(arm=Arm.OTA_OTO_EAW)
    _, _, aux = obj.evaluate(net, episode.support_x, episode.support_y, episode.text,
                             bank=PrototypeBank.zeros(2, 8), update_bank=True)
    return episode, net, obj, aux["plans"], aux["bank"]


def test_03_gradient_suite():
    start = time.perf_counter()
    episode, net, obj, plans, bank = gradient_setup()
    params = net.trainable()
    names = sorted(params)
    theta, _ = flatten_params(params, names)
    errors = {}
    for only in ("l_cos", "l_ota", "l_eaw", None):
        def f(t):
            assign_flat(params, names, t)
            terms, grads, _ = obj.evaluate(net, episode.support_x, episode.support_y, episode.text, bank=bank,
                                           plans=plans, only=only)
            value = terms["total"] if only is None else terms[only]
            return value, np.concatenate([np.ravel(grads.get(n, np.zeros_like(params[n]))) for n in names])

        errors[only or "l_train"] = grad_check(theta.copy(), f, h=1e-5)
    assign_flat(params, names, theta)
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) <= 1e-4 and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    assert verdict(3, ok, f"max relative error {detail} over {theta.size} parameters, {elapsed:.1f} s")


def test_04_detachment():
    cfg = acceptance_config()
    clf, _ = fit_seed(cfg.with_overrides({"epochs": 0}), cfg.seeds[0])
    x, y, text, net = clf.support_x_, clf.support_y_, clf.text_, clf.network_

    def l_ota(sink):
        obj = Objective(arm=Arm.OTA_OTO_EAW, sinkhorn=sink)
        terms, _, aux = obj.evaluate(net, x, y, text, bank=clf.bank_, with_grad=False)
        return terms["l_ota"], aux["solve"]

    base, solve = l_ota(SinkhornConfig(max_iters=100))
    more, _ = l_ota(SinkhornConfig(max_iters=101))
    converged = bool(np.all(solve.converged))
    change = abs(more - base)
    # informational: force exactly one update past the slowest pair's stopping point
    k = int(np.max(solve.iterations))
    forced = [l_ota(SinkhornConfig(max_iters=n, tol=5e-324))[0] for n in (k, k + 1)]
    assert verdict(4, converged and change < 1e-9, f"L_OTA change {change:.1e} from 100 to 101 iterations"
                                                    f" (all plans converged: {converged}; one forced extra update"
                                                    f" after {k} changes it by {abs(forced[1] - forced[0]):.1e})")


def test_05_eaw_closed_forms():
    rng = np.random.default_rng(505)
    worst_r = worst_d = 0.0
    for c in (2, 3, 5, 10):
        terms = eaw_terms(PrototypeBank.zeros(c, 6), rng.normal(size=(c, 6)), LossWeights())
        worst_r = max(worst_r, abs(terms["r"] - math.log(c)))
        worst_d = max(worst_d, abs(terms["difficulty"] + (1 - 1 / c)))
    one_hot = eaw_terms(PrototypeBank(np.eye(4)), np.eye(4), LossWeights(tau=1e-3))["difficulty"]
    ok = worst_r <= 1e-6 and worst_d <= 1e-12 and one_hot == 0.0
    assert verdict(5, ok, f"|r - log C| {worst_r:.1e}, |difficulty + (1 - 1/C)| {worst_d:.1e}, one-hot difficulty {one_hot}")


def test_06_prototype_schedule():
    rng = np.random.default_rng(606)
    bank = PrototypeBank.zeros(3, 4)
    seen = [bank.mu]
    for _ in range(60):
        bank = update_prototypes(bank, rng.normal(size=(3, 4)), [0, 1, 2])
        seen.append(bank.mu)
    expect = [min(0.5 + 0.02 * n, 1.0) for n in range(61)]
    assert verdict(6, seen == expect, f"mu after n steps equals min(0.5 + 0.02 n, 1) exactly for n = 0..60")


@pytest.fixture(scope="module")
def suites(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return acceptance_suite(root / "run_a"), acceptance_suite(root / "run_b")


def fmt(report):
    f = report.final
    return f"{f['accuracy_mean']:.3f}±{f['accuracy_std']:.3f}"


def test_07_arm_ordering(suites):
    result = suites[0]
    reports = [r for _, r in result["arms"]]
    means = [r.final["accuracy_mean"] for r in reports]
    stds = [r.final["accuracy_std"] for r in reports]
    steps_ok = all(means[i + 1] >= means[i] - min(stds[i], stds[i + 1]) for i in range(3))
    lift = means[-1] - means[0]
    elapsed = result["timing"]["arms_s"]
    ok = steps_ok and lift >= 0.02 and elapsed < 600
    chain = " -> ".join(f"{r.config.ablation.value} {fmt(r)}" for r in reports)
    assert verdict(7, ok, f"{chain}; final - Baseline {lift:+.3f}; {elapsed:.0f} s")


def test_08_alignment(suites):
    reports = [r for _, r in suites[0]["arms"]]
    base, final = reports[0].final["mnn_mean"], reports[-1].final["mnn_mean"]
    assert verdict(8, final > base, f"MNN final arm {final:.3f} vs Baseline {base:.3f}")


def test_09_cost_kinds(suites):
    rows = {p["cost"]: r.final["accuracy_mean"] for p, r in suites[0]["costs"]}
    ok = rows["cosine"] >= rows["constant"]
    assert verdict(9, ok, f"accuracy cosine {rows['cosine']:.3f} vs constant {rows['constant']:.3f}"
                          f" (euclidean {rows['euclidean']:.3f}, unconstrained)")


def test_10_heatmap_identity(suites):
    worst, count = 0.0, 0
    with open(suites[0]["out"] / "heatmaps" / "heatmaps.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            h = [float(v) for k, v in row.items() if k.startswith("h_")]
            worst = max(worst, abs(sum(1.0 - v for v in h) - float(row["distance"])))
            count += 1
    assert verdict(10, count > 0 and worst <= 1e-9, f"max |sum(1 - h) - distance| {worst:.1e} over {count} rows")


def test_11_determinism(suites):
    a, b = suites[0]["out"], suites[1]["out"]
    names = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    other = sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    differing = [str(n) for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = names == other and not differing and len(names) > 0
    assert verdict(11, ok, f"{len(names)} CSV files compared, {len(differing)} differ")


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-q", "-s", "-p", "no:cacheprovider"]))
