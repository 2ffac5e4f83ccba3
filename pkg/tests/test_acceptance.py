"""One test per acceptance criterion; each reports a single pass/fail line.

The privacy audit (criterion 6) runs last so it sees the transcripts
collected by the other criteria.
"""

import math
import random
import time

import numpy as np

from zprobe.attacks import AttackKind, AttackSpec, WrongSeed, attacked_indices, magnitude_flag
from zprobe.config import ExperimentConfig
from zprobe.field import P, FixedVec, fp_encode, vec_sum
from zprobe.harness import run_training
from zprobe.primitives import default_threshold, prg_eval
from zprobe.robust import cluster_means, compute_q, derive_threshold, sample_indices
from zprobe.secagg import DropStage, audit_share_requests, default_degree, run_aggregation
from zprobe.zk import (
    ZKSession, correctness_circuit, correctness_cost, robustness_circuit, robustness_cost,
)

AUDITED: list[tuple[str, list[int]]] = []  # (label, violating client ids)


def audit(label, messages):
    AUDITED.append((label, audit_share_requests(messages)))


def binomial_floor(p, trials):
    return p - 3 * math.sqrt(p * (1 - p) / trials)


# -- 1 -----------------------------------------------------------------------

def test_criterion_1_check_table(acceptance):
    t0 = time.perf_counter()
    want = {0.1: 51, 0.3: 15, 0.5: 8, 0.7: 5, 1.0: 1}
    got = {s: compute_q(60000, s, 0.005).q for s in want}
    dt = time.perf_counter() - t0
    ok = got == want and dt < 1.0
    acceptance.line(1, ok, f"q = {list(got.values())} for S_m = {list(want)}, {dt:.3f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_criterion_2_aggregation_correctness(acceptance):
    rng = random.Random(2024)
    t0 = time.perf_counter()
    bad = []
    for trial in range(200):
        n = rng.randint(2, 64)
        mode = rng.choice(["full", "neighbor"])
        k = n - 1 if mode == "full" else min(default_degree(n), n - 1)
        slack = k - default_threshold(k)  # dropouts every neighborhood can absorb
        drops = rng.sample(range(1, n + 1), min(rng.randint(0, 2), slack))
        dropouts = {c: rng.choice(list(DropStage)) for c in drops}
        length = rng.randint(1, 16)
        gen = np.random.default_rng(trial)
        ups = {i: FixedVec.from_real(gen.normal(size=length)) for i in range(1, n + 1)}
        tr = run_aggregation(ups, seed=trial, mode=mode, q=trial % 3, dropouts=dropouts)
        audit(f"criterion 2 trial {trial}", tr.messages)
        survivors = [i for i in range(1, n + 1) if i not in dropouts]
        want = vec_sum([ups[i].coords for i in survivors], length)
        if not np.array_equal(tr.aggregate.coords, want) or tr.survivors != survivors:
            bad.append(trial)
    dt = time.perf_counter() - t0
    ok = not bad and dt < 60
    acceptance.line(2, ok, f"{200 - len(bad)}/200 configurations exact, {dt:.1f}s")
    assert ok, bad


# -- 3 -----------------------------------------------------------------------

def _masked(cid, b, pairs, u, indices):
    out = {}
    for k in indices:
        v = u[k] + prg_eval(b, k)
        for j, a in pairs.items():
            v += -prg_eval(a, k) if j < cid else prg_eval(a, k)
        out[k] = v % P
    return out


def test_criterion_3_zk_completeness_soundness(acceptance):
    t0 = time.perf_counter()
    rng = random.Random(3)
    gen = np.random.default_rng(3)
    l, q, cid = 60000, 8, 4

    honest = 0
    for run in range(1000):
        b = rng.randrange(P)
        pairs = {j: rng.randrange(P) for j in (1, 2, 6)}
        idx = sample_indices(l, q, run, cid)
        u = {k: fp_encode(float(gen.normal(0, 0.1))) for k in idx}
        lam = {k: fp_encode(float(gen.normal(0, 0.01))) for k in idx}
        theta = {k: fp_encode(1.0) for k in idx}
        masked = _masked(cid, b, pairs, u, idx)
        s = ZKSession(run)
        gates = correctness_cost(q, len(pairs)) + robustness_cost(theta, idx)
        s.preprocess(randoms=q + 1 + len(pairs) + gates, triples=gates)
        wires = s.commit("u", u)
        c = correctness_circuit(s, cid, s.authenticate(b),
                                {j: s.authenticate(a) for j, a in pairs.items()}, wires, masked, idx)
        r = robustness_circuit(s, wires, lam, theta, idx)
        honest += c.passed and r.passed

    trials, detected = 10_000, 0
    for run in range(trials):
        tampered = np.zeros(l, dtype=bool)
        tampered[attacked_indices(l, 0.5, 10_000 + run)] = True
        idx = sample_indices(l, q, 10_000 + run, cid)
        b = rng.randrange(P)
        u = {k: fp_encode(float(gen.normal(0, 0.1))) for k in idx}
        masked = _masked(cid, b, {}, u, idx)
        for k in idx:
            if tampered[k]:
                masked[k] = (masked[k] + rng.randrange(1, P)) % P
        s = ZKSession(run)
        gates = correctness_cost(q, 0)
        s.preprocess(randoms=q + 1 + gates, triples=gates)
        verdict = correctness_circuit(s, cid, s.authenticate(b), {}, s.commit("u", u), masked, idx)
        detected += not verdict.passed
    rate, floor = detected / trials, binomial_floor(0.995, trials)

    s = ZKSession(99)
    s.preprocess(randoms=1)
    w = s.authenticate(424242)
    forged = 0
    for _ in range(100_000):
        value = rng.randrange(P)
        if value != w.value:
            forged += s.check_opening(value, rng.randrange(P), w.key)

    dt = time.perf_counter() - t0
    ok = honest == 1000 and rate >= floor and forged == 0 and dt < 300
    acceptance.line(3, ok, f"honest {honest}/1000; detection {rate:.4f} (floor {floor:.4f}); "
                           f"forgeries accepted {forged}/100000; {dt:.0f}s")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_criterion_4_clt_threshold(acceptance):
    t0 = time.perf_counter()
    gen = np.random.default_rng(4)
    n_c, c, l, trials = 10, 7, 500, 40
    sigmas = []
    for _ in range(trials):
        aggs = []
        for _ in range(c):
            ups = [FixedVec.from_real(gen.normal(size=l)) for _ in range(n_c)]
            aggs.append(FixedVec(vec_sum([u.coords for u in ups], l), ups[0].scale_bits))
        bounds = derive_threshold(cluster_means(aggs, [n_c] * c), eta=1.0)
        sigmas.append(bounds.sigma_mu.mean())
    est, target = float(np.mean(sigmas)), 1 / math.sqrt(n_c)
    rel = abs(est - target) / target
    dt = time.perf_counter() - t0
    ok = rel <= 0.05 and dt < 30
    acceptance.line(4, ok, f"mean sigma_mu {est:.4f} vs {target:.4f} ({100 * rel:.1f}% off, "
                           f"{c} clusters, ddof=1), {dt:.1f}s")
    assert ok


# -- 5 -----------------------------------------------------------------------

BASE = ExperimentConfig(name="acceptance", seed=1, epochs=20, n_clients=50, clusters=7,
                        byzantine_fraction=0.25, transcript="all", figures=False)
ATTACKS = [  # kind, kappa, (b) min drop in points, (c) max gap in points
    (AttackKind.SIGN_FLIP, 5.0, 20, 2),
    (AttackKind.SCALING, 10.0, 10, 3),
    (AttackKind.NON_OMNISCIENT, 1.5, 10, 3),
]


def _run(cfg, label):
    result = run_training(cfg)
    for rec in result.records:
        audit(f"{label} epoch {rec.epoch}", rec.transcript.messages)
    return result


def test_criterion_5_defense_efficacy(acceptance):
    t0 = time.perf_counter()
    benign = _run(BASE.with_overrides(attack=AttackSpec(), byzantine_fraction=0.0), "benign")
    base_acc = 100 * benign.final_accuracy
    lines = [f"(a) benign {base_acc:.1f}% [{'ok' if base_acc >= 99 else 'FAIL'}]"]
    ok = base_acc >= 99
    for kind, kappa, drop_min, gap_max in ATTACKS:
        spec = AttackSpec(kind, kappa, 1.0, 3)
        off = _run(BASE.with_overrides(attack=spec, defense=False), f"{kind.value} off")
        on = _run(BASE.with_overrides(attack=spec), f"{kind.value} on")
        drop = base_acc - 100 * off.final_accuracy
        gap = abs(base_acc - 100 * on.final_accuracy)
        later = on.metrics[5:]
        per_client = [sum(i in m.flagged for m in later) / len(later) for i in on.byzantine]
        worst = min(per_client)
        checks = {"b": drop >= drop_min, "c": gap <= gap_max, "d": worst >= 0.95}
        ok &= all(checks.values())
        lines.append(f"{kind.value}: (b) drop {drop:.1f} pts [{'ok' if checks['b'] else 'FAIL'}] "
                     f"(c) gap {gap:.1f} pts [{'ok' if checks['c'] else 'FAIL'}] "
                     f"(d) min flag rate {worst:.2f} [{'ok' if checks['d'] else 'FAIL'}]")
    dt = time.perf_counter() - t0
    ok &= dt < 300
    acceptance.line(5, ok, "; ".join(lines) + f"; {dt:.0f}s")
    assert ok


# -- 7 -----------------------------------------------------------------------

def test_criterion_7_wrong_seed(acceptance):
    runs, n, l = 1000, 5, 100
    gen = np.random.default_rng(7)
    rejected = flagged = 0
    for run in range(runs):
        ups = {i: FixedVec.from_real(gen.normal(0, 0.1, size=l)) for i in range(1, n + 1)}
        bad = 1 + run % n

        def factory(cid, update, neighbors, seed, run=run):
            return WrongSeed(cid, update, neighbors, seed, attack_seed=run)

        checked = run_aggregation(ups, seed=run, q=1, factories={bad: factory})
        audit(f"criterion 7 checked {run}", checked.messages)
        rejected += not checked.verdicts[bad].passed and bad not in checked.survivors

        plain = run_aggregation(ups, seed=run, q=0, factories={bad: factory})
        audit(f"criterion 7 unchecked {run}", plain.messages)
        flagged += magnitude_flag(plain.aggregate.decode() / len(plain.survivors), 10.0)
    ok = rejected == runs and flagged / runs >= 0.999
    acceptance.line(7, ok, f"rejected {rejected}/{runs} with checks; "
                           f"magnitude flag rate {flagged / runs:.3f} without")
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_criterion_8_scaling_contract(acceptance):
    l = 200
    gen = np.random.default_rng(8)
    ratios = {}
    for n in (32, 64, 128, 256):
        ups = {i: FixedVec.from_real(gen.normal(size=l)) for i in range(1, n + 1)}
        tr = run_aggregation(ups, seed=n, mode="neighbor", q=8)
        audit(f"criterion 8 n={n}", tr.messages)
        per_client = max(tr.mul_counts.values())
        ratios[n] = per_client / (math.log2(n) * l)
    spread = max(ratios.values()) / min(ratios.values())
    ok = spread <= 1.5
    shown = ", ".join(f"n={n}: {r:.2f}" for n, r in ratios.items())
    acceptance.line(8, ok, f"muls / (log2 n * l): {shown}; max/min {spread:.2f}")
    assert ok


# -- 6 (last) ------------------------------------------------------------------

def test_criterion_6_privacy_ledger(acceptance):
    if not AUDITED:  # run in isolation: audit a small defended run of our own
        _run(BASE.with_overrides(epochs=3, attack=AttackSpec(AttackKind.SIGN_FLIP, 5.0, 1.0, 3)),
             "criterion 6")
    violations = [(label, ids) for label, ids in AUDITED if ids]
    ok = not violations
    acceptance.line(6, ok, f"{len(AUDITED)} transcripts audited, {len(violations)} with both "
                           f"share kinds requested for one client")
    assert ok, violations[:5]
