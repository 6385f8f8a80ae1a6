"""End-to-end acceptance checks, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line that is printed in the pytest
terminal summary. The training-based checks read the run cache described in
``acceptance_plan.py`` and train whatever is missing (several hours from cold).
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from weakseg import autodiff as ad
from weakseg import experiments, lagrangian as lag, losses, segnet, trainer
from weakseg import weak_labels as wl
from weakseg.bounds import BoundScheme
from weakseg.experiments import majority, mean
from weakseg.losses import Bounds
from weakseg.segnet import NetworkConfig

import acceptance_plan as plan
from conftest import CRITERIA
from oracles import brute_point, erosion, kl_grid_optimum, random_instance, random_mask
from test_autodiff import OPS, _case


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    CRITERIA.append(line)
    print(line)
    assert ok, line


def best(runs):
    return [r.best_dice for r in runs]


def fmt(values):
    return "/".join(f"{v:.3f}" for v in values)


# ---------------------------------------------------------------------------
# 1: gradients


def _loss_cases(rng):
    """One builder per training loss on a small network, penalties kept active."""
    cfg = NetworkConfig(depth=1, base_channels=2, height=8, width=8)
    p = segnet.init(cfg, int(rng.integers(1 << 30)))
    imgs = rng.normal(size=(3, 1, 8, 8))
    codes = rng.choice([0, 1, 2], size=(3, 8, 8), p=[0.7, 0.15, 0.15])
    fwd = lambda: segnet.forward_batch(p, imgs)
    sizes = fwd().foreground.sum(axis=(1, 2))
    # bounds a few pixels away from the current size so no kink is crossed
    shift = rng.choice([-1.0, 1.0], size=3) * rng.uniform(3, 6, size=3)
    per_image = [Bounds(v + d, v + d + 2) if d > 0 else Bounds(max(v + d - 2, 0), v + d) for v, d in zip(sizes, shift)]
    total = sizes.sum()
    volume = Bounds(total + 5, total + 9)
    fx = losses.coordinate_potential(8, 8)
    stat = losses.fractional_statistic(fwd(), fx).data
    frac = losses.FractionalSpec(fx, Bounds(stat.max() + 0.5, stat.max() + 1.0))
    q = rng.uniform(size=(3, 8, 8))
    return p, {
        "partial CE": lambda: ad.sum_all(losses.partial_cross_entropy(fwd(), codes)),
        "combined penalty loss": lambda: ad.sum_all(losses.combined_loss(fwd(), codes, per_image)),
        "3D volume penalty": lambda: losses.batch_volume_penalty(fwd(), codes, volume),
        "fractional penalty": lambda: ad.sum_all(
            ad.add(losses.fractional_penalty(fwd(), frac), losses.partial_cross_entropy(fwd(), codes))
        ),
        "proposal CE": lambda: lag.proposal_loss(fwd(), q),
    }


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst = {}
    for kind in OPS:
        rng = np.random.default_rng(100 + OPS.index(kind))
        for _ in range(10):
            build, leaves = _case(kind, rng)
            err = ad.finite_difference_check(build, leaves, h=1e-4, max_coords=None)
            worst[kind] = max(worst.get(kind, 0.0), err)
    rng = np.random.default_rng(7)
    for _ in range(10):
        params, builds = _loss_cases(rng)
        for name, build in builds.items():
            err = ad.finite_difference_check(build, list(params), h=1e-5, max_coords=12, rng=rng)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    report(1, "gradient correctness", ok,
           f"{len(worst)} ops/losses x 10 instances, max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2: penalty closed form


def _closed_form(v, a, b):
    # d * d, not d ** 2: libm pow is not always correctly rounded
    if v < a:
        return (v - a) * (v - a), 2 * (v - a)
    if v > b:
        return (v - b) * (v - b), 2 * (v - b)
    return 0.0, 0.0


def test_criterion_02_penalty_closed_form():
    rng = np.random.default_rng(2)
    value_mismatch = 0
    grad_err = 0.0
    n_equal = 0
    for i in range(1000):
        a = float(rng.uniform(0, 4096))
        b = a if i % 5 == 0 else float(a + rng.uniform(0, 2048))
        n_equal += a == b
        r = rng.integers(4)
        v = [a, b, float(rng.uniform(0, 6000)), float(rng.uniform(a, b))][r]
        t = ad.Tensor(np.array(v), requires_grad=True)
        c = losses.size_penalty(t, Bounds(a, b))
        (g,) = ad.gradients(c, [t])
        ref_c, ref_g = _closed_form(v, a, b)
        value_mismatch += np.float64(c.item()).tobytes() != np.float64(ref_c).tobytes()
        grad_err = max(grad_err, abs(float(g) - ref_g))
    nonzero = 0
    for seed in range(10):
        p = segnet.init(NetworkConfig(depth=1, base_channels=2, height=8, width=8), seed)
        img = rng.normal(size=(1, 8, 8))
        v = losses.predicted_size(segnet.forward(p, img)).item()
        for lo, hi in ((v - 1, v + 1), (v, v), (v, v + 3), (v - 3, v)):
            pen = losses.size_penalty(losses.predicted_size(segnet.forward(p, img)), Bounds(lo, hi))
            nonzero += sum(int(np.count_nonzero(g)) for g in ad.gradients(ad.scalar_mul(pen, 1e-2), list(p)))
    ok = value_mismatch == 0 and grad_err < 1e-12 and nonzero == 0
    report(2, "penalty closed form", ok,
           f"1000 triples ({n_equal} with a=b): {value_mismatch} value mismatches, max grad err {grad_err:.1e}; "
           f"{nonzero} non-zero parameter gradients inside bounds")


# ---------------------------------------------------------------------------
# 3: Lagrangian proposals vs grid oracle


def test_criterion_03_lagrangian_oracle():
    rng = np.random.default_rng(3)
    kl_gap = es_kl_gap = bound_err = es_diff = 0.0
    n = 12
    for _ in range(n):
        s, b = random_instance(rng)
        solver = lambda es: lag.DualState(step=2.0 / s.size, early_stop=es)
        q_es, _ = lag.synthesize_proposal(s, b, solver(True))
        q, st = lag.synthesize_proposal(s, b, solver(False))
        assert st.iterations == 500
        _, kl_opt = kl_grid_optimum(s, b.lower, b.upper)
        kl_gap = max(kl_gap, abs(lag.kl_divergence(q, s) - kl_opt))
        es_kl_gap = max(es_kl_gap, abs(lag.kl_divergence(q_es, s) - kl_opt))
        for v in (q.sum(), q_es.sum()):
            if v < b.lower:
                bound_err = max(bound_err, (b.lower - v) / b.lower)
            elif v > b.upper:
                bound_err = max(bound_err, (v - b.upper) / b.upper)
        es_diff = max(es_diff, float(np.abs(q - q_es).max()))
    ok = kl_gap < 1e-3 and bound_err <= 0.05 and es_diff < 1e-3
    report(3, "Lagrangian oracle equivalence", ok,
           f"{n} instances: KL gap {kl_gap:.1e} (early-stopped {es_kl_gap:.1e}), bound violation "
           f"{100 * bound_err:.2f}%, early-stop vs 500 iters {es_diff:.1e} per pixel")


# ---------------------------------------------------------------------------
# 4-7, 10: training runs


@pytest.fixture(scope="module")
def log():
    return lambda m: print(m, flush=True)


def test_criterion_04_supervision_ordering(log):
    r = plan.results("c4", log)
    names = ["partial_ce", "tag", "common", "individual", "full"]
    d = {k: best(r[k]) for k in names}
    flags = []
    for i in range(len(plan.SEEDS)):
        pce, tag, com, ind, full = (d[k][i] for k in names)
        flags.append(pce < tag <= com < ind <= full and ind >= 0.85 * full and pce <= 0.5 * full)
    means = {k: mean(v) for k, v in d.items()}
    detail = ", ".join(f"{k} {fmt(d[k])}" for k in names)
    report(4, "supervision ordering", majority(flags),
           f"seeds ok {flags}; {detail}; individual/full {means['individual'] / means['full']:.3f}")


def test_full_supervision_reference(log):
    full = best(plan.results("c4", log)["full"])
    assert min(full) >= 0.90, full


@pytest.mark.parametrize("name", [
    pytest.param("tag", marks=pytest.mark.xfail(strict=True, reason=(
        "absent slices have bounds (0, 0) and a softmax size is never exactly 0, "
        "so the rate is pinned at the absent fraction from the first epoch"))),
    "common",
    "individual",
])
def test_penalty_violation_rate_trends_down(log, name):
    for seed, run in zip(plan.SEEDS, plan.results("c4", log)[name]):
        rates = [rec["violation_rate"] for rec in run.records]
        first, last = np.mean(rates[:10]), np.mean(rates[-10:])
        assert last < first, (seed, first, last)


def test_criterion_05_penalty_beats_lagrangian(log):
    r = plan.results("c5", log)
    pen, lg = best(r["individual"]), best(r["lagrangian"])
    flags = [p - q >= 0.02 for p, q in zip(pen, lg)]
    report(5, "penalty beats Lagrangian", majority(flags),
           f"seeds ok {flags}; penalty {fmt(pen)}, lagrangian {fmt(lg)}")


def test_criterion_06_hybrid_trend(log):
    r = plan.results("c6", log)
    hy, f5, wa = best(r["hybrid_5"]), best(r["full_5"]), best(r["weak_all"])
    flags = [h - f >= 0.05 and h >= w for h, f, w in zip(hy, f5, wa)]
    report(6, "hybrid trend", majority(flags),
           f"seeds ok {flags}; hybrid_5 {fmt(hy)}, full_5 {fmt(f5)}, weak_all {fmt(wa)}")


def test_criterion_07_bound_ablation(log):
    r = plan.results("c7", log)
    m = {k: mean(best(v)) for k, v in r.items()}
    ok = m["tight"] > m["upper_5x"] > m["upper_10x"] and abs(m["lower_0"] - m["tight"]) < 0.02
    report(7, "bound ablation trend", ok,
           f"mean Dice tight {m['tight']:.3f} > 5x {m['upper_5x']:.3f} > 10x {m['upper_10x']:.3f}; "
           f"lower 0 {m['lower_0']:.3f} (diff {m['lower_0'] - m['tight']:+.3f})")


def test_criterion_10_volume_constraint(log):
    r = plan.results("c10", log)
    ind, vol = best(r["individual"]), best(r["volume3d"])
    flags = [abs(v - i) <= 0.05 for v, i in zip(vol, ind)]
    report(10, "3D constraint", majority(flags),
           f"seeds ok {flags}; volume3d {fmt(vol)}, individual {fmt(ind)}")


# ---------------------------------------------------------------------------
# 8: step times


def test_criterion_08_efficiency():
    ds = experiments.corpus(plan.CORPUS)
    lag_cfg = replace(plan.BASE, bounds=BoundScheme("individual"))
    no_es = replace(lag_cfg, lagrangian=replace(lag_cfg.lagrangian, early_stop=False))
    bench = lambda mode, cfg: trainer.benchmark_step_time(mode, cfg, ds, n_batches=100, warmup=5)
    # alternate the two cheap modes and keep the best of three to damp scheduler noise
    pce = pen = np.inf
    for _ in range(3):
        pce = min(pce, bench("partial_ce", plan.BASE))
        pen = min(pen, bench("penalty", plan.BASE))
    es = bench("lagrangian", lag_cfg)
    full = bench("lagrangian", no_es)
    ok = abs(pen / pce - 1) <= 0.10 and es >= 1.5 * pce and full >= 1.5 * es
    report(8, "efficiency", ok,
           f"ms/batch partial_ce {pce:.1f}, penalty {pen:.1f} ({pen / pce:.3f}x), "
           f"lagrangian {es:.1f} ({es / pce:.2f}x), without early stop {full:.1f} ({full / es:.2f}x of early stop)")


# ---------------------------------------------------------------------------
# 9: weak labels


def test_criterion_09_weak_labels():
    outside = 0
    n = 0
    for weak in ("erosion", "point"):
        ds = experiments.corpus(replace(plan.CORPUS, weak=weak))
        for s in ds.samples:
            outside += int(np.count_nonzero((s.weak > 0) & ~(s.mask > 0)))
            n += 1
    ds = experiments.corpus(plan.CORPUS)
    sparsity = wl.labeled_fraction([s.weak for s in ds.samples])
    rng = np.random.default_rng(9)
    ero_bad = pt_bad = 0
    done = 0
    while done < 50:
        m = random_mask(rng)
        if not m.any():
            continue
        got, _ = wl.erode_label(m)
        expect = next(erosion(m, k) for k in wl.DEFAULT_KERNELS if erosion(m, k).any())
        ero_bad += not np.array_equal(got.astype(bool), expect)
        seed = int(rng.integers(1 << 30))
        pt = wl.random_point_label(m, np.random.default_rng(seed)).astype(bool)
        pt_bad += not np.array_equal(pt, brute_point(m, np.random.default_rng(seed), wl.MAX_RADIUS))
        done += 1
    ok = outside == 0 and 0.0002 <= sparsity <= 0.005 and ero_bad == 0 and pt_bad == 0
    report(9, "weak-label properties", ok,
           f"{outside} labeled pixels outside ground truth over {n} samples; erosion sparsity "
           f"{100 * sparsity:.3f}%; oracle mismatches erosion {ero_bad}/50, point {pt_bad}/50")
