import numpy as np
import pytest

from vflpriv.attack import (AdaptiveAttacker, AttackDecoder, AttackReport, DecoderConfig, DecoderTarget, FeatureTap,
                            collect_poison_pairs, evaluate_attack, train_adaptive_decoder, train_static_decoder)
from vflpriv.data import PoisonSet, sample_poison
from vflpriv.errors import AttackSetupError, DomainError
from vflpriv.metrics import MetricKind
from vflpriv.nn import build_mlp
from vflpriv.nn.model import MlpModel
from vflpriv.protocol import IntermediateOutput, train_vfl

from test_protocol import small_system


def test_target_shapes_and_extract():
    raw = np.array([[0, 2, 1.5], [1, 0, -0.5]], dtype=float)
    t = DecoderTarget("categorical", (1,), 3)
    assert t.out_width == 3 and list(t.extract(raw)) == [2, 0]
    onehot = np.array([[0, 0, 1, 7], [1, 0, 0, 7]], dtype=float)
    assert list(DecoderTarget("categorical", (0, 1, 2), 3).extract(onehot)) == [2, 0]
    r = DecoderTarget("regression", (2,))
    assert r.extract(raw).shape == (2, 1) and r.default_metric() == MetricKind.MSE
    assert DecoderTarget.all_binary(4).default_metric() == MetricKind.RECALL
    with pytest.raises(DomainError):
        DecoderTarget("categorical", (0, 1), 3)
    with pytest.raises(DomainError):
        DecoderTarget("ordinal", (0,))


def test_decoder_width_checked():
    with pytest.raises(AttackSetupError):
        AttackDecoder(build_mlp(4, ["linear:2"], np.random.default_rng(0)), DecoderTarget.all_binary(3))


def tapped_run(seed=0, epochs=3, alpha=0.1):
    sys_ = small_system(seed)
    poison = sample_poison(sys_.train_rows, alpha, seed)
    tap = FeatureTap(1, poison)
    snaps = {}
    train_vfl(sys_, epochs, 16, 1e-2, seed, tap=tap,
              on_epoch=lambda r: snaps.__setitem__(r.epoch, sys_.clients[1].model.copy()))
    return sys_, poison, tap, snaps


def test_tap_records_each_poison_row_once_per_epoch():
    sys_, poison, tap, _ = tapped_run()
    pairs = collect_poison_pairs(tap, poison, sys_.clients[1].shard)
    assert sorted(pairs) == [1, 2, 3]
    for epoch, ps in pairs.items():
        assert [p.record_id for p in ps] == sorted(int(i) for i in poison.indices)
        assert all(np.array_equal(p.raw, sys_.clients[1].shard[p.record_id]) for p in ps)


def test_tap_jsonl_round_trip():
    sys_, poison, tap, _ = tapped_run(epochs=2)
    back = FeatureTap.from_jsonl(tap.to_jsonl(), poison)
    assert len(back.entries) == len(tap.entries)
    for a, b in zip(tap.entries, back.entries):
        assert a[:2] == b[:2] and np.array_equal(a[2], b[2]) and np.array_equal(a[3], b[3])


def test_tap_ignores_other_clients_and_is_read_only():
    poison = PoisonSet(np.array([1, 2]), 0.5)
    tap = FeatureTap(1, poison)
    feats = np.ones((3, 2))
    tap(IntermediateOutput(0, 1, 0, feats, np.array([0, 1, 2])))
    assert tap.entries == []
    tap(IntermediateOutput(1, 1, 0, feats, np.array([0, 1, 2])))
    assert [int(r) for r in tap.entries[0][2]] == [1, 2]
    with pytest.raises(ValueError):
        feats[0, 0] = 5.0


def test_collect_rejects_incomplete_or_foreign_records():
    poison = PoisonSet(np.array([1, 2]), 0.5)
    tap = FeatureTap(1, poison)
    tap.entries.append((1, 0, np.array([1]), np.zeros((1, 2))))
    with pytest.raises(AttackSetupError, match="lacks"):
        collect_poison_pairs(tap, poison, np.zeros((4, 3)))
    tap.entries.append((1, 1, np.array([3]), np.zeros((1, 2))))
    with pytest.raises(AttackSetupError, match="not in the poison set"):
        collect_poison_pairs(tap, poison, np.zeros((4, 3)))


def test_identity_victim_is_fully_reconstructed():
    rng = np.random.default_rng(0)
    x = (rng.random((400, 6)) < 0.5).astype(float)
    ident = MlpModel([], width=6)
    poison = PoisonSet(np.arange(200), 0.5)
    tap = FeatureTap(0, poison)
    tap(IntermediateOutput(0, 1, 0, ident(x[:200]), np.arange(200)))
    pairs = collect_poison_pairs(tap, poison, x)[1]
    dec = train_static_decoder(pairs, DecoderTarget.all_binary(6), DecoderConfig(200, 0.01, 32), seed=0)
    assert evaluate_attack(dec, ident, x, np.arange(200, 400), "recall", poison) == 1.0
    assert evaluate_attack(dec, ident, x, np.arange(200, 400), "error_rate") == 0.0
    with pytest.raises(AttackSetupError, match="overlap"):
        evaluate_attack(dec, ident, x, np.arange(150, 250), "recall", poison)
    with pytest.raises(DomainError):
        evaluate_attack(dec, ident, x, np.arange(200, 400), "auc_pr")


def test_static_attack_beats_chance_on_trained_victim():
    sys_, poison, tap, snaps = tapped_run(seed=1, epochs=3, alpha=0.3)
    shard = sys_.clients[1].shard
    pairs = collect_poison_pairs(tap, poison, shard)
    unseen = np.setdiff1d(sys_.train_rows, poison.indices)
    dec = train_static_decoder(pairs[3], DecoderTarget.all_binary(10), DecoderConfig(200, 0.01, 16), seed=0)
    assert evaluate_attack(dec, snaps[3], shard, unseen, "recall", poison) > 0.6


def test_static_and_adaptive_setup_errors():
    cfg = DecoderConfig(1, 0.01, 8)
    t = DecoderTarget.all_binary(2)
    with pytest.raises(AttackSetupError):
        train_static_decoder([], t, cfg, 0)
    with pytest.raises(AttackSetupError):
        train_adaptive_decoder({}, t, cfg, 0)
    sys_, poison, tap, _ = tapped_run(epochs=2)
    pairs = collect_poison_pairs(tap, poison, sys_.clients[1].shard)
    with pytest.raises(AttackSetupError, match="one epoch"):
        train_static_decoder(pairs[1] + pairs[2], DecoderTarget.all_binary(10), cfg, 0)
    att = AdaptiveAttacker(DecoderTarget.all_binary(10), cfg, 0)
    att.update(2, pairs[2])
    with pytest.raises(AttackSetupError, match="out of order"):
        att.update(1, pairs[1])


def test_adaptive_decoder_warm_starts():
    sys_, poison, tap, _ = tapped_run(epochs=3)
    pairs = collect_poison_pairs(tap, poison, sys_.clients[1].shard)
    cfg = DecoderConfig(5, 0.01, 8)
    dec = train_adaptive_decoder(pairs, DecoderTarget.all_binary(10), cfg, 0)
    per_epoch = -(-len(poison) // 8) * 5
    assert dec.steps == 3 * per_epoch
    again = train_adaptive_decoder(pairs, DecoderTarget.all_binary(10), cfg, 0)
    assert np.array_equal(dec.model.flatten(), again.model.flatten())


def test_attack_report_summary():
    rep = AttackReport(MetricKind.RECALL)
    for e, v in [(1, 0.7), (2, 0.9), (3, 0.8)]:
        rep.add(e, v)
    assert rep.summary.value == 0.9 and rep.summary.epoch == 2
    assert '"summary": "min_privacy"' in rep.to_jsonl()
