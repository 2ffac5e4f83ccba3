import logging

import numpy as np
import pytest

from zprobe.attacks import AttackKind, AttackSpec
from zprobe.config import DropoutEvent, ExperimentConfig
from zprobe.field import FixedVec, vec_sum
from zprobe.harness import RoundParams, load_dataset, build_model, run_training, secure_round
from zprobe.models import local_step
from zprobe.secagg import DropStage

SMALL = dict(n_clients=12, clusters=3, epochs=4, per_client=32, test_size=500)


def test_benign_two_dim_separable_reaches_99():
    cfg = ExperimentConfig(dim=2, epochs=50, defense=False, correctness_checks=False, **{
        k: v for k, v in SMALL.items() if k != "epochs"})
    res = run_training(cfg)
    first = next(m.epoch for m in res.metrics if m.accuracy >= 0.99)
    assert first <= 50 and res.final_accuracy >= 0.99


def test_same_config_same_metrics():
    cfg = ExperimentConfig(attack=AttackSpec(AttackKind.SIGN_FLIP, 5), **SMALL)
    a, b = run_training(cfg), run_training(cfg)
    def strip(ms):  # wall-clock phases are the only nondeterministic field
        return [{k: v for k, v in m.__dict__.items() if k != "phase_ms"} for m in ms]

    assert strip(a.metrics) == strip(b.metrics)
    assert a.records[-1].transcript.to_bytes() == b.records[-1].transcript.to_bytes()


def test_defense_is_noop_for_honest_accuracy():
    on = run_training(ExperimentConfig(**SMALL))
    off = run_training(ExperimentConfig(defense=False, **SMALL))
    assert abs(on.final_accuracy - off.final_accuracy) <= 0.01


def test_secure_fedavg_matches_plaintext_fedavg():
    cfg = ExperimentConfig(defense=False, **SMALL)
    res = run_training(cfg)
    data = load_dataset(cfg)
    model = build_model(cfg, data.dim, data.classes)
    tol = model.size * 2.0 ** -cfg.scale_bits
    for m in res.metrics:
        ups = [local_step(model, *data.shards[i - 1], cfg.lr, cfg.batch_size,
                          np.random.default_rng([cfg.seed, 200, m.epoch, i]), cfg.scale_bits)
               for i in range(1, cfg.n_clients + 1)]
        model.params = model.params + np.mean(ups, axis=0)
        assert m.accuracy == pytest.approx(model.accuracy(data.test_x, data.test_y), abs=0.01)
    assert np.max(np.abs(model.params - res.model.params)) <= tol * len(res.metrics)


def test_flagged_disjoint_from_contributors():
    rng = np.random.default_rng(0)
    ups = {i: FixedVec.from_real(rng.normal(0, 0.1, 10)) for i in range(1, 16)}
    ups[3] = FixedVec.from_real(-5 * ups[3].decode() + 3.0)
    out = secure_round(ups, RoundParams(clusters=3, q_correctness=2, q_robustness=10), seed=1)
    flagged = out.flagged_correctness | out.flagged_robustness
    assert 3 in flagged
    assert not flagged & set(out.contributors)
    expect = vec_sum([ups[i].coords for i in out.contributors], 10)
    assert out.aggregate.coords.tolist() == expect.tolist()


def test_all_byzantine_round_is_skipped(caplog):
    cfg = ExperimentConfig(attack=AttackSpec(AttackKind.WRONG_SEED), byzantine_fraction=1.0,
                           **{**SMALL, "epochs": 2})
    with caplog.at_level(logging.WARNING):
        res = run_training(cfg)
    assert all(m.skipped for m in res.metrics)
    assert np.array_equal(res.model.params, build_model(cfg, cfg.dim, cfg.classes).params)
    assert "skipped" in caplog.text


def test_scripted_dropout_in_training():
    cfg = ExperimentConfig(dropouts=(DropoutEvent(2, 3, 4, DropStage.AFTER_R2),), **SMALL)
    res = run_training(cfg)
    assert res.metrics[1].contributors < res.metrics[0].contributors or 4 in res.metrics[1].flagged


def test_parameters_stay_finite_under_attack():
    cfg = ExperimentConfig(defense=False, attack=AttackSpec(AttackKind.SCALING, 10), **SMALL)
    res = run_training(cfg)
    assert np.all(np.isfinite(res.model.params))
