import math

import numpy as np
import pytest

from splitlora.channel import FadingModel
from splitlora.federation import (
    DeviceState,
    FeatureUplink,
    GradientUplink,
    TrainingConfig,
    aggregate,
    init_devices,
    run_round,
    run_training,
)
from splitlora.lora import UpdateMode
from splitlora.model import init_split_model
from splitlora.numerics import RngStream
from splitlora.oracle import MonolithicState, monolithic_round
from splitlora.privacy import Binding


def _noiseless_cfg(**kw):
    base = dict(mode=UpdateMode.UPDATE_BOTH, rounds=3, devices=1,
                epsilon_target=None, n0=0.0,
                fading=FadingModel.constant(1.0), p_max=25.0,
                eta_global=0.05, eta_local=0.2, clip_c=0.5,
                d_x=6, width=8, layers=2, rank=2, classes=3,
                n_samples=60, fraction=1.0, margin=2.0)
    base.update(kw)
    return TrainingConfig(**base)


def _records_fingerprint(result):
    return [
        (r.round_index, r.train_loss, r.test_accuracy,
         tuple((s.device, s.h, s.alpha, s.snr, s.binding.value, s.epsilon_round)
               for s in r.device_stats))
        for r in result.records
    ]


class TestCentralizedEquivalence:
    def test_noiseless_single_device_round_matches_monolithic(self):
        cfg = _noiseless_cfg(rounds=1)
        rng = RngStream(0)
        devices, test = init_devices(cfg, rng)
        model = init_split_model(rng.child("model-init"), cfg.d_x, cfg.width,
                                 cfg.layers, cfg.rank, cfg.mode, cfg.scale,
                                 cfg.activation, cfg.encoder_gain)
        mono = MonolithicState(
            w_embed=np.array(model.w_embed),
            encoder=[np.array(w) for w in model.encoder],
            a_mats=[np.array(ad.a) for ad in model.adapters],
            b_mats=[np.array(ad.b) for ad in model.adapters],
            head_w=np.array(devices[0].head.w),
            head_b=np.array(devices[0].head.bias))
        xs = list(devices[0].shard.features)
        ys = [int(y) for y in devices[0].shard.labels]
        new_model, _ = run_round(model, devices, cfg, rng, 1, test=test)
        monolithic_round(mono, xs, ys, cfg.mode, cfg.clip_c,
                         cfg.eta_global, cfg.eta_local, cfg.activation)
        for i, ad in enumerate(new_model.adapters):
            assert np.max(np.abs(ad.a - mono.a_mats[i])) <= 1e-10
            assert np.max(np.abs(ad.b - mono.b_mats[i])) <= 1e-10
        assert np.max(np.abs(devices[0].head.w - mono.head_w)) <= 1e-10
        assert np.max(np.abs(devices[0].head.bias - mono.head_b)) <= 1e-10


class TestAggregate:
    def test_single_device_is_identity(self):
        g = [(np.arange(4.0).reshape(2, 2), np.ones((2, 2)))]
        out = aggregate([g], [10])
        assert np.array_equal(out[0][0], g[0][0])
        assert np.array_equal(out[0][1], g[0][1])

    def test_one_three_weighting(self):
        g1 = [(np.full((2, 2), 1.0), np.full((2, 2), 2.0))]
        g2 = [(np.full((2, 2), 5.0), np.full((2, 2), 6.0))]
        out = aggregate([g1, g2], [1, 3])
        assert np.allclose(out[0][0], 0.25 * 1.0 + 0.75 * 5.0, rtol=1e-15)
        assert np.allclose(out[0][1], 0.25 * 2.0 + 0.75 * 6.0, rtol=1e-15)

    def test_equal_gradients_are_a_fixed_point(self):
        gen = RngStream(1).child("agg").generator()
        g = [(gen.normal(size=(3, 4)), gen.normal(size=(4, 3)))]
        out = aggregate([g, g, g], [2, 5, 9])
        assert np.allclose(out[0][0], g[0][0], rtol=1e-15)
        assert np.allclose(out[0][1], g[0][1], rtol=1e-15)

    def test_bitwise_permutation_invariance(self):
        gen = RngStream(2).child("agg").generator()
        grads = [[(gen.normal(size=(3, 4)), gen.normal(size=(4, 3)))]
                 for _ in range(5)]
        sizes = [3, 7, 11, 2, 9]
        base = aggregate(grads, sizes)
        perm = [3, 0, 4, 2, 1]
        swapped = aggregate([grads[i] for i in perm], [sizes[i] for i in perm])
        assert np.array_equal(base[0][0], swapped[0][0])
        assert np.array_equal(base[0][1], swapped[0][1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([], [])


class TestRunRound:
    def test_equal_shards_average_arithmetically(self):
        cfg = _noiseless_cfg(devices=3, fraction=0.2, rounds=1)
        rng = RngStream(3)
        devices, test = init_devices(cfg, rng)
        assert len({len(d.shard) for d in devices}) == 1

    def test_zero_global_rate_freezes_adapters_but_not_heads(self):
        cfg = _noiseless_cfg(eta_global=0.0, rounds=1)
        rng = RngStream(4)
        devices, test = init_devices(cfg, rng)
        model = init_split_model(rng.child("model-init"), cfg.d_x, cfg.width,
                                 cfg.layers, cfg.rank, cfg.mode, cfg.scale,
                                 cfg.activation, cfg.encoder_gain)
        before = [(ad.a.tobytes(), ad.b.tobytes()) for ad in model.adapters]
        head_before = devices[0].head.w.tobytes()
        new_model, _ = run_round(model, devices, cfg, rng, 1, test=test)
        after = [(ad.a.tobytes(), ad.b.tobytes()) for ad in new_model.adapters]
        assert before == after
        assert devices[0].head.w.tobytes() != head_before

    def test_device_order_does_not_change_the_round(self):
        cfg = TrainingConfig(rounds=1, devices=4, epsilon_target=3.0,
                             d_x=6, width=8, layers=2, rank=2, classes=3,
                             n_samples=80, fraction=0.25, margin=2.0)
        rng = RngStream(5)
        devices, test = init_devices(cfg, rng)
        model = init_split_model(rng.child("model-init"), cfg.d_x, cfg.width,
                                 cfg.layers, cfg.rank, cfg.mode, cfg.scale,
                                 cfg.activation, cfg.encoder_gain)
        m1, r1 = run_round(model, [devices[i] for i in (0, 1, 2, 3)], cfg, rng, 1, test=test)
        devices2, _ = init_devices(cfg, rng)
        m2, r2 = run_round(model, [devices2[i] for i in (2, 0, 3, 1)], cfg, rng, 1, test=test)
        for a, b in zip(m1.adapters, m2.adapters):
            assert np.array_equal(a.a, b.a)
            assert np.array_equal(a.b, b.b)
        assert r1 == r2

    def test_power_and_payload_contracts(self):
        cfg = TrainingConfig(rounds=2, devices=3, epsilon_target=5.0,
                             d_x=6, width=8, layers=1, rank=2, classes=3,
                             n_samples=60, fraction=0.3, margin=2.0)
        rng = RngStream(6)
        devices, test = init_devices(cfg, rng)
        model = init_split_model(rng.child("model-init"), cfg.d_x, cfg.width,
                                 cfg.layers, cfg.rank, cfg.mode, cfg.scale,
                                 cfg.activation, cfg.encoder_gain)
        log = []
        for t in (1, 2):
            model, record = run_round(model, devices, cfg, rng, t, test=test,
                                      message_log=log)
            for st, dev in zip(record.device_stats, devices):
                assert (st.alpha * cfg.clip_c) ** 2 <= cfg.p_max * (1 + 1e-9)
        payloads = [m for m in log if isinstance(m, GradientUplink)]
        assert len(payloads) == 6
        for m in payloads:
            dev = devices[m.device]
            alpha = dev.alphas[m.round_index - 1]
            assert float(np.linalg.norm(m.payload)) <= alpha * cfg.clip_c * (1 + 1e-12)

    def test_message_firewall_only_embedded_dims_cross_the_air(self):
        # d_x, width and classes all distinct so a leak is a shape violation
        cfg = TrainingConfig(rounds=1, devices=2, epsilon_target=3.0,
                             d_x=6, width=10, layers=1, rank=2, classes=3,
                             n_samples=60, fraction=0.3, margin=2.0)
        rng = RngStream(7)
        devices, test = init_devices(cfg, rng)
        model = init_split_model(rng.child("model-init"), cfg.d_x, cfg.width,
                                 cfg.layers, cfg.rank, cfg.mode, cfg.scale,
                                 cfg.activation, cfg.encoder_gain)
        log = []
        run_round(model, devices, cfg, rng, 1, test=test, message_log=log)
        assert log, "round produced no messages"
        for msg in log:
            assert isinstance(msg, (FeatureUplink, GradientUplink))
            arrays = msg.features if isinstance(msg, FeatureUplink) else (msg.payload,)
            for arr in arrays:
                assert arr.shape == (cfg.width,)


class TestRunTraining:
    def test_empty_schedule(self):
        cfg = _noiseless_cfg(rounds=0)
        result = run_training(cfg, RngStream(8))
        assert result.records == []
        assert all(not np.any(ad.b) for ad in result.model.adapters)
        assert all(s.realized_epsilon == 0.0 for s in result.spends)

    def test_bit_identical_reruns(self):
        cfg = TrainingConfig(rounds=3, devices=3, epsilon_target=3.0,
                             d_x=6, width=8, layers=2, rank=2, classes=3,
                             n_samples=60, fraction=0.3, margin=2.0)
        r1 = run_training(cfg, RngStream(9))
        r2 = run_training(cfg, RngStream(9))
        assert _records_fingerprint(r1) == _records_fingerprint(r2)
        for a, b in zip(r1.model.adapters, r2.model.adapters):
            assert np.array_equal(a.a, b.a) and np.array_equal(a.b, b.b)

    def test_noiseless_separable_task_reaches_95_percent(self):
        cfg = _noiseless_cfg(rounds=200, devices=2, n_samples=120, fraction=0.5,
                             margin=4.0, eta_local=0.3, eta_global=0.02)
        result = run_training(cfg, RngStream(10))
        assert result.records[-1].test_accuracy >= 0.95

    def test_realized_epsilon_stays_within_budget(self):
        cfg = TrainingConfig(rounds=5, devices=4, epsilon_target=2.0,
                             d_x=6, width=8, layers=1, rank=2, classes=3,
                             n_samples=80, fraction=0.25, margin=2.0)
        result = run_training(cfg, RngStream(11))
        for spend in result.spends:
            assert spend.realized_epsilon <= 2.0 * (1 + 1e-9)
            assert len(spend.per_round_epsilon) == 5

    def test_fixed_frame_modes_keep_the_frame_across_rounds(self):
        for mode in (UpdateMode.FIXED_GAUSSIAN_A, UpdateMode.FIXED_ORTHONORMAL_A):
            cfg = TrainingConfig(mode=mode, rounds=4, devices=2, epsilon_target=3.0,
                                 d_x=6, width=8, layers=2, rank=2, classes=3,
                                 n_samples=60, fraction=0.3, margin=2.0)
            rng = RngStream(12)
            devices, test = init_devices(cfg, rng)
            model = init_split_model(rng.child("model-init"), cfg.d_x, cfg.width,
                                     cfg.layers, cfg.rank, cfg.mode, cfg.scale,
                                     cfg.activation, cfg.encoder_gain)
            frames = [ad.a.tobytes() for ad in model.adapters]
            for t in range(1, 5):
                model, _ = run_round(model, devices, cfg, rng, t, test=test)
            assert [ad.a.tobytes() for ad in model.adapters] == frames

    def test_frozen_weights_never_move(self):
        cfg = TrainingConfig(rounds=3, devices=2, epsilon_target=3.0,
                             d_x=6, width=8, layers=2, rank=2, classes=3,
                             n_samples=60, fraction=0.3, margin=2.0)
        rng = RngStream(13)
        devices, test = init_devices(cfg, rng)
        model = init_split_model(rng.child("model-init"), cfg.d_x, cfg.width,
                                 cfg.layers, cfg.rank, cfg.mode, cfg.scale,
                                 cfg.activation, cfg.encoder_gain)
        embed_bytes = model.w_embed.tobytes()
        enc_bytes = [w.tobytes() for w in model.encoder]
        for t in range(1, 4):
            model, _ = run_round(model, devices, cfg, rng, t, test=test)
        assert model.w_embed.tobytes() == embed_bytes
        assert [w.tobytes() for w in model.encoder] == enc_bytes

    def test_adam_local_optimizer_runs_and_differs_from_gd(self):
        kw = dict(rounds=3, devices=2, epsilon_target=3.0, d_x=6, width=8,
                  layers=1, rank=2, classes=3, n_samples=60, fraction=0.3,
                  margin=2.0)
        gd = run_training(TrainingConfig(local_optimizer="gd", **kw), RngStream(14))
        adam = run_training(TrainingConfig(local_optimizer="adam", **kw), RngStream(14))
        assert not np.array_equal(gd.devices[0].head.w, adam.devices[0].head.w)

    def test_round_stats_are_consistent_with_power_control(self):
        cfg = TrainingConfig(rounds=3, devices=3, epsilon_target=100.0, p_max=0.25,
                             d_x=6, width=8, layers=1, rank=2, classes=3,
                             n_samples=60, fraction=0.3, margin=2.0)
        result = run_training(cfg, RngStream(15))
        bindings = [s.binding for r in result.records for s in r.device_stats]
        assert Binding.POWER in bindings  # loose budget, tight power cap
