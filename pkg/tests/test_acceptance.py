"""Acceptance criteria.  Each test logs one PASS/FAIL line, shown in the
``acceptance criteria`` section of the pytest summary."""
import dataclasses
import time

import numpy as np
import pytest

from mos.adapters import AdapterRegistry, ema_merge, save_registry
from mos.backbone import AdapterSet, build_backbone
from mos.gradcheck import run_gradcheck
from mos.harness import (ABLATION_VARIANTS, VariantFlags, prepare_stream, run_experiment,
                         run_naive_baseline, save_run, standard_benchmark)
from mos.inference import CYCLE, FIXED_POINT, CachedLogits, infer_task_id, predict_with_adapter, self_refine
from mos.numerics import cholesky, make_rng, sample_gaussian
from mos.stream import ClassTaskMap
from mos.training import PrototypeBank, train_task

SEEDS = range(1993, 1998)


def record(log, name, ok, detail):
    log.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def test_image_benchmark_accuracies_substituted(acceptance_log):
    # Absolute image-benchmark accuracies need a large pretrained vision
    # backbone; the property-based criteria below stand in for them.
    acceptance_log.append("SUBST absolute image-benchmark accuracies: replaced by the property suite below")


def test_gradient_exactness(acceptance_log):
    t0 = time.perf_counter()
    res = run_gradcheck(100, seed=0)
    elapsed = time.perf_counter() - t0
    ok = res.ok and elapsed < 120
    record(acceptance_log, "gradient exactness", ok,
           f"{res.checked} entries, {len(res.failures)} failures, max rel err {res.max_rel_err:.2e}, "
           f"{res.skipped} kink skips, {elapsed:.1f}s")


def loop_merge(current, history, alpha):
    out = []
    for k, cur in enumerate(current.arrays()):
        w = np.empty_like(cur)
        for idx in np.ndindex(cur.shape):
            acc = 0.0
            for h in history:
                acc += h.arrays()[k][idx]
            w[idx] = (1.0 - alpha) * cur[idx] + (alpha / len(history)) * acc
        out.append(w)
    return out


def test_ema_merge_oracle(acceptance_log):
    rng = make_rng(2024)
    mismatches = 0
    for _ in range(1000):
        L, d, r = (int(v) for v in rng.integers(1, 4, 3))
        n_hist = int(rng.integers(1, 6))

        def rand():
            return AdapterSet([rng.standard_normal((d, r)) for _ in range(L)],
                              [rng.standard_normal((r, d)) for _ in range(L)])

        hist, cur = [rand() for _ in range(n_hist)], rand()
        alpha = float(rng.uniform())
        got = ema_merge(cur, hist, alpha).arrays()
        mismatches += any(a.tobytes() != b.tobytes() for a, b in zip(got, loop_merge(cur, hist, alpha)))

    cfg = standard_benchmark(1993)
    stream = prepare_stream(cfg)
    bb = build_backbone(cfg.backbone)
    reg = AdapterRegistry(alpha=0.1)
    tcfg = dataclasses.replace(cfg.train, epochs=2)
    changed = 0
    for b in range(4):
        before = [a.checksum() for a in reg.history]
        train_task(stream.train[b], bb, reg, tcfg, classes=list(stream.task_map.classes(b)))
        changed += sum(a.checksum() != c for a, c in zip(reg.history, before))
    record(acceptance_log, "EMA merge oracle", mismatches == 0 and changed == 0,
           f"{mismatches}/1000 bitwise mismatches, {changed} historical checksum changes")


def random_instance(rng):
    B = int(rng.integers(2, 13))
    sizes = rng.integers(1, 4, B)
    tm = ClassTaskMap(sizes)
    d = int(rng.integers(2, 6))
    bank = PrototypeBank()
    for t in range(B):
        for c, p in enumerate(rng.standard_normal((tm.num_classes, d))):
            bank.set(t, c, p)
    embs = rng.standard_normal((B, d))
    return tm, bank, embs


def test_self_refine_termination(acceptance_log):
    rng = make_rng(7)
    over_budget = bad_fixed = 0
    reasons = {}
    for _ in range(10_000):
        tm, bank, embs = random_instance(rng)
        logits = CachedLogits(lambda t: embs[t], bank, tm.num_classes)
        j, tr = self_refine(logits, tm)
        over_budget += logits.calls > tm.num_tasks
        reasons[tr.reason] = reasons.get(tr.reason, 0) + 1
        if tr.reason == FIXED_POINT:
            check = predict_with_adapter(embs[j], j, bank, tm.num_classes)
            bad_fixed += infer_task_id(check, tm) != j

    # adapter 0 -> task 1, adapter 1 -> task 2, adapter 2 -> task 1
    tm = ClassTaskMap([1, 1, 1])
    bank = PrototypeBank()
    for t in range(3):
        for c in range(3):
            bank.set(t, c, np.eye(3)[c])
    embs = np.eye(3)[[1, 2, 1]]
    outcomes = set()
    for _ in range(50):
        j, tr = self_refine(CachedLogits(lambda t: embs[t], bank, 3), tm)
        outcomes.add((j, tr.reason))
    cycle_ok = outcomes == {(1, CYCLE)}
    record(acceptance_log, "self-refine termination", over_budget == 0 and bad_fixed == 0 and cycle_ok,
           f"10000 banks, {over_budget} over budget, {bad_fixed} inconsistent fixed points, "
           f"reasons {dict(sorted(reasons.items()))}, 2-cycle -> {sorted(outcomes)}")


def test_floor_rule(acceptance_log):
    wrong = checked = 0
    for n in range(1, 1001):
        B = max(2, 1000 // n)
        tm = ClassTaskMap([n] * B)
        logits = np.zeros(n * B)
        for c in range(n * B):
            logits[c] = 1.0
            wrong += infer_task_id(logits, tm) != c // n
            logits[c] = 0.0
            checked += 1
    record(acceptance_log, "floor rule", wrong == 0, f"{checked} class indices over |Y_b| = 1..1000, {wrong} wrong")


def test_nearest_class_mean(acceptance_log):
    rng = make_rng(11)
    wrong = 0
    for _ in range(1000):
        C, d = int(rng.integers(2, 20)), int(rng.integers(2, 16))
        protos = rng.standard_normal((C, d))
        bank = PrototypeBank()
        for c, p in enumerate(protos):
            bank.set(0, c, p)
        q = rng.standard_normal(d)
        brute = max(range(C), key=lambda c: (sum(q[i] * protos[c, i] for i in range(d))
                                             / (np.sqrt(sum(v * v for v in q)) * np.sqrt(sum(v * v for v in protos[c])))))
        wrong += int(np.argmax(predict_with_adapter(q, 0, bank, C))) != brute
    record(acceptance_log, "nearest class mean", wrong == 0, f"{wrong}/1000 disagreements")


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    out = {name: [] for name in [*ABLATION_VARIANTS, "oracle", "naive"]}
    variants = {**ABLATION_VARIANTS, "oracle": VariantFlags(oracle_task_ids=True)}
    for seed in SEEDS:
        base = standard_benchmark(seed)
        stream = prepare_stream(base)
        for name, flags in variants.items():
            out[name].append(run_experiment(dataclasses.replace(base, flags=flags), name, stream).report)
        out["naive"].append(run_naive_baseline(base, stream))
    return out, time.perf_counter() - t0


def test_directional_ablation(acceptance_log, benchmark):
    reports, elapsed = benchmark
    mean_ab = {k: float(np.mean([r.last_accuracy for r in v])) for k, v in reports.items()}
    order = ["baseline", "merge", "self_refine", "ensemble"]
    ordered = all(mean_ab[b] >= mean_ab[a] - 1.0 for a, b in zip(order, order[1:]))
    margin = mean_ab["ensemble"] - mean_ab["naive"]
    ok = ordered and margin >= 2.0 and elapsed < 600
    summary = ", ".join(f"{k} {mean_ab[k]:.2f}" for k in [*order, "naive"])
    record(acceptance_log, "directional ablation", ok,
           f"mean A_B {summary}; MOS - naive = {margin:.2f}; {elapsed:.0f}s")


def test_oracle_upper_bound(acceptance_log, benchmark):
    reports, _ = benchmark
    oracle = np.mean([r.stage_accuracy for r in reports["oracle"]], axis=0)
    refined = np.mean([r.stage_accuracy for r in reports["self_refine"]], axis=0)
    ok = bool(np.all(oracle >= refined)) and oracle[-1] >= 95.0
    record(acceptance_log, "oracle upper bound", ok,
           f"oracle A_B {oracle[-1]:.2f}, min stage gap {np.min(oracle - refined):.3f}")


def test_gaussian_replay(acceptance_log):
    rng = make_rng(99)
    d, n = 8, 10_000
    A = rng.standard_normal((d, d))
    sigma = A @ A.T / d + 0.1 * np.eye(d)
    mu = rng.standard_normal(d) * 3
    x = sample_gaussian(mu, cholesky(sigma), n, rng)
    mean_err = np.abs(x.mean(axis=0) - mu)
    bound = 4 * np.sqrt(np.diag(sigma)) / np.sqrt(n)
    diff = x - x.mean(axis=0)
    cov = diff.T @ diff / n
    rel = np.linalg.norm(cov - sigma) / np.linalg.norm(sigma)
    ok = bool(np.all(mean_err < bound)) and rel < 0.05
    record(acceptance_log, "gaussian replay", ok,
           f"max mean err / bound {np.max(mean_err / bound):.3f}, covariance rel err {rel:.4f}")


def test_determinism(acceptance_log, tmp_path):
    cfg = dataclasses.replace(standard_benchmark(1993), write_diagnostics=True)
    for name in ("a", "b"):
        save_run(run_experiment(cfg), cfg, tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(p) for p in files if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    needed = {"metrics.json", "diagnostics.csv", "checkpoints/backbone.mos", "checkpoints/gaussian_stats.mos"}
    present = needed <= {str(p) for p in files}
    record(acceptance_log, "determinism", not differ and present,
           f"{len(files)} files compared, {len(differ)} differ {differ[:3]}")


def test_storage_accounting(acceptance_log, tmp_path):
    cfg = standard_benchmark(1993)
    art = run_experiment(dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=1)))
    total = save_registry(art.registry, tmp_path)
    on_disk = sum(p.stat().st_size for p in tmp_path.glob("adapter_*.mos"))
    B, L, d, r = len(art.registry), cfg.backbone.num_blocks, cfg.backbone.embed_dim, cfg.train.r
    header = 24
    expected = B * L * 2 * d * r * 4 + B * header
    record(acceptance_log, "storage accounting", total == on_disk == expected,
           f"{on_disk} bytes on disk, expected {B}*{L}*2*{d}*{r}*4 + {B}*{header} = {expected}")
