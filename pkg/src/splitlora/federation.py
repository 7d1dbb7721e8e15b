"""Round choreography: devices, TDMA uplinks, aggregation, adapter updates.

Each round runs the same five steps per device in sequential TDMA order:
embed the local batch, run the server encoder and feed representations
back (noiseless downlink), take one local head step and form the batch
gradient deviation, clip / scale / transmit over the fading uplink, then
backpropagate the received vector through every sample's trace. The server
aggregates per-device adapter gradients by dataset-size weights and takes
one global step. All randomness is keyed by (round, device, purpose), and
aggregation uses exact summation, so results do not depend on device
order or execution interleaving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelState, FadingModel, draw_channel, equalize, power_ok, snr, transmit_uplink
from .data import Dataset, generate, partition
from .lora import UpdateMode, apply_update
from .model import (
    AdamState,
    SplitModel,
    TaskHead,
    adam_head_step,
    backprop_to_adapters,
    embed,
    encoder_forward,
    head_gradients,
    init_split_model,
    init_task_head,
    softmax_stats,
    task_loss,
)
from .privacy import (
    Binding,
    PrivacyConfig,
    PrivacySpend,
    account_rounds,
    clip_gradient,
    epsilon_from_sigma,
    power_control_alpha,
    with_strong_composition,
)


@dataclass(frozen=True)
class TrainingConfig:
    """Everything one training run needs; a pure value, validated up front."""

    mode: UpdateMode = UpdateMode.UPDATE_BOTH
    rounds: int = 30
    devices: int = 15
    # privacy (epsilon_target None disables the budget, for noiseless baselines)
    epsilon_target: float | None = 3.0
    delta: float = 1e-5
    clip_c: float = 0.01
    c1: float = 1.0
    strong_composition: bool = False
    # channel
    fading: FadingModel = field(default_factory=lambda: FadingModel.rayleigh())
    n0: float = 1.0
    p_max: float = 25.0
    # optimization
    eta_global: float = 1e-3
    eta_local: float = 0.05
    local_optimizer: str = "gd"
    descale: bool = True
    # model
    d_x: int = 16
    width: int = 32
    layers: int = 2
    rank: int = 4
    scale: float = 0.1
    classes: int = 4
    activation: str = "tanh"
    encoder_gain: float = 1.0
    # data
    n_samples: int = 600
    fraction: float = 0.05
    margin: float = 3.0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.devices < 1:
            raise ValueError("need at least one device")
        if self.epsilon_target is not None and self.epsilon_target <= 0:
            raise ValueError("epsilon_target must be positive or None")
        if self.local_optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown local optimizer {self.local_optimizer!r}")
        if self.eta_global < 0 or self.eta_local < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.n0 < 0:
            raise ValueError("noise density must be nonnegative")

    def privacy_config(self) -> PrivacyConfig:
        eps = math.inf if self.epsilon_target is None else self.epsilon_target
        cfg = PrivacyConfig(epsilon_target=eps, delta=self.delta, clip_c=self.clip_c,
                            rounds=max(self.rounds, 1), c1=self.c1)
        return with_strong_composition(cfg) if self.strong_composition else cfg


@dataclass
class DeviceState:
    """One edge device: data shard, task head, and its uplink history."""

    device_id: int
    shard: Dataset
    head: TaskHead
    adam: AdamState | None = None
    alphas: list[float] = field(default_factory=list)
    hs: list[float] = field(default_factory=list)
    bindings: list[Binding] = field(default_factory=list)


@dataclass(frozen=True)
class FeatureUplink:
    """Device-to-server message carrying embedded features only."""

    device: int
    round_index: int
    features: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class GradientUplink:
    """Device-to-server message: the scaled clipped gradient deviation
    (pre-noise payload; the channel adds noise on top of it)."""

    device: int
    round_index: int
    payload: np.ndarray


@dataclass(frozen=True)
class RoundDeviceStats:
    device: int
    h: float
    alpha: float
    snr: float
    binding: Binding
    epsilon_round: float
    local_loss: float


@dataclass(frozen=True)
class RoundRecord:
    """Full per-round trace for metrics and accounting."""

    round_index: int
    device_stats: tuple[RoundDeviceStats, ...]
    train_loss: float
    test_accuracy: float


@dataclass
class TrainingResult:
    records: list[RoundRecord]
    model: SplitModel
    devices: list[DeviceState]
    spends: list[PrivacySpend]
    test: Dataset


# Training at extreme noise levels can legitimately diverge; updates whose
# parameters would pass this energy are frozen instead so every state the
# simulator exposes stays finite and the run remains well-defined.
_DIVERGENCE_ENERGY_CAP = 1e16


def _weighted_sum(arrays, weights) -> np.ndarray:
    """Exactly rounded weighted sum per entry; invariant to input order."""
    flat = np.stack(arrays).reshape(len(arrays), -1)
    if not np.all(np.isfinite(flat)):
        return np.full(np.asarray(arrays[0]).shape, np.nan)
    out = np.array([math.fsum(w * flat[k, j] for k, w in enumerate(weights))
                    for j in range(flat.shape[1])])
    return out.reshape(np.asarray(arrays[0]).shape)


def _within_cap(*arrays) -> bool:
    with np.errstate(over="ignore"):
        for arr in arrays:
            if not np.all(np.isfinite(arr)) or float(np.sum(arr * arr)) > _DIVERGENCE_ENERGY_CAP:
                return False
    return True


def aggregate(per_device_grads, sizes) -> list[tuple[np.ndarray, np.ndarray]]:
    """Dataset-size weighted mean of per-device adapter gradients.

    Uses exact (fsum) accumulation per entry, so the result is bit
    identical under any permutation of the devices.
    """
    if not per_device_grads:
        raise ValueError("no gradients to aggregate")
    sizes = [int(s) for s in sizes]
    if len(sizes) != len(per_device_grads):
        raise ValueError("one size per device required")
    if any(s <= 0 for s in sizes):
        raise ValueError("shard sizes must be positive")
    total = sum(sizes)
    weights = [s / total for s in sizes]
    n_layers = len(per_device_grads[0])
    out = []
    for i in range(n_layers):
        ga = _weighted_sum([g[i][0] for g in per_device_grads], weights)
        gb = _weighted_sum([g[i][1] for g in per_device_grads], weights)
        out.append((ga, gb))
    return out


def _device_batch_stats(dev: DeviceState, model: SplitModel):
    """Forward the whole shard; returns traces, mean loss, mean gradient
    deviation and mean head gradients, all at the current parameters."""
    n = len(dev.shard)
    traces = []
    loss_sum = 0.0
    g_sum = None
    gw_sum = np.zeros_like(dev.head.w)
    gb_sum = np.zeros_like(dev.head.bias)
    for x, y in zip(dev.shard.features, dev.shard.labels):
        z_e = embed(model, x)
        z, trace = encoder_forward(model, z_e)
        traces.append(trace)
        loss, _, err = softmax_stats(dev.head, z, int(y))
        loss_sum += loss
        g = dev.head.w.T @ err
        g_sum = g if g_sum is None else g_sum + g
        gw_sum += np.outer(err, z)
        gb_sum += err
    return traces, loss_sum / n, g_sum / n, gw_sum / n, gb_sum / n


def _local_head_update(dev: DeviceState, gw, gb, cfg: TrainingConfig) -> None:
    if not _within_cap(gw, gb):
        return  # divergence guard: freeze the head at its last finite value
    if cfg.local_optimizer == "adam":
        if dev.adam is None:
            dev.adam = AdamState.for_head(dev.head)
        candidate = adam_head_step(dev.head, dev.adam, gw, gb, cfg.eta_local)
    else:
        candidate = TaskHead(w=dev.head.w - cfg.eta_local * gw,
                             bias=dev.head.bias - cfg.eta_local * gb)
    if _within_cap(candidate.w, candidate.bias):
        dev.head = candidate


def run_round(model: SplitModel, devices: list[DeviceState], cfg: TrainingConfig,
              rng, t: int, test: Dataset | None = None,
              message_log: list | None = None) -> tuple[SplitModel, RoundRecord]:
    """One communication round over all devices; returns the updated model.

    Device heads are updated in place; the model (adapters) is replaced as
    a value. Noise and fading streams are keyed by (round, device), so the
    realized draws do not depend on processing order.
    """
    privacy = cfg.privacy_config()
    per_device_grads = {}
    stats = {}
    sizes = {}
    for dev in sorted(devices, key=lambda d: d.device_id):
        k = dev.device_id
        traces, local_loss, g_mean, gw, gb = _device_batch_stats(dev, model)
        if message_log is not None:
            message_log.append(FeatureUplink(
                device=k, round_index=t,
                features=tuple(tr.z_e for tr in traces)))
        _local_head_update(dev, gw, gb, cfg)
        g_tilde = clip_gradient(g_mean, cfg.clip_c)
        h = draw_channel(cfg.fading, rng.child(t, k, "fading"))
        ch = ChannelState(h=h, n0=cfg.n0, p_max=cfg.p_max)
        alpha, binding = power_control_alpha(privacy, ch)
        if not power_ok(alpha, cfg.clip_c, ch):
            raise RuntimeError(f"power violation at round {t}, device {k}")
        if message_log is not None:
            message_log.append(GradientUplink(device=k, round_index=t,
                                              payload=alpha * g_tilde))
        y = transmit_uplink(g_tilde, alpha, ch, rng.child(t, k, "uplink-noise"))
        g_hat = equalize(y, h, cfg.fading.h_floor)
        if cfg.descale:
            g_hat = g_hat / alpha if alpha > 0 else np.zeros_like(g_hat)
        grads = None
        for trace in traces:
            sample_grads = backprop_to_adapters(model, trace, g_hat)
            if grads is None:
                grads = [[ga, gb_] for ga, gb_ in sample_grads]
            else:
                for i, (ga, gb_) in enumerate(sample_grads):
                    grads[i][0] += ga
                    grads[i][1] += gb_
        m = len(traces)
        per_device_grads[k] = [(ga / m, gb_ / m) for ga, gb_ in grads]
        sizes[k] = len(dev.shard)
        eps_round = epsilon_from_sigma(privacy.c1, alpha * h, privacy.clip_c,
                                       math.sqrt(cfg.n0), 1, privacy.delta)
        dev.alphas.append(alpha)
        dev.hs.append(h)
        dev.bindings.append(binding)
        stats[k] = RoundDeviceStats(
            device=k, h=h, alpha=alpha,
            snr=snr(alpha, cfg.clip_c, cfg.width, cfg.n0),
            binding=binding, epsilon_round=eps_round, local_loss=local_loss)
    order = sorted(per_device_grads)
    g_a = aggregate([per_device_grads[k] for k in order], [sizes[k] for k in order])
    new_adapters = []
    for ad, (ga, gb_) in zip(model.adapters, g_a):
        if _within_cap(ga, gb_):
            candidate = apply_update(ad, ga, gb_, cfg.eta_global)
            if _within_cap(candidate.a, candidate.b):
                new_adapters.append(candidate)
                continue
        new_adapters.append(ad)  # divergence guard: freeze this layer
    new_model = model.with_adapters(new_adapters)
    total = sum(sizes.values())
    train_loss = math.fsum(stats[k].local_loss * sizes[k] / total for k in order)
    accuracy = evaluate(new_model, devices, test) if test is not None else math.nan
    record = RoundRecord(round_index=t,
                         device_stats=tuple(stats[k] for k in order),
                         train_loss=train_loss, test_accuracy=accuracy)
    return new_model, record


def evaluate(model: SplitModel, devices: list[DeviceState], test: Dataset) -> float:
    """Mean test accuracy of the per-device heads on the shared encoder.

    A diverged model (non-finite activations or logits) is a legitimate
    training outcome at very noisy operating points; such predictions
    count as wrong rather than poisoning the caller with NaN.
    """
    zs = []
    for x in test.features:
        try:
            zs.append(encoder_forward(model, embed(model, x))[0])
        except ValueError:
            zs.append(None)
    accs = []
    for dev in sorted(devices, key=lambda d: d.device_id):
        correct = 0
        for z, y in zip(zs, test.labels):
            if z is None:
                continue
            logits = dev.head.w @ z + dev.head.bias
            if not np.all(np.isfinite(logits)):
                continue
            if int(np.argmax(logits)) == int(y):
                correct += 1
        accs.append(correct / len(test))
    return float(np.mean(accs))


def init_devices(cfg: TrainingConfig, rng) -> tuple[list[DeviceState], Dataset]:
    """Generate data, partition shards, and create fresh device states."""
    data_seed = rng.child("dataset").derive_seed()
    train, test = generate(data_seed, cfg.n_samples, cfg.d_x, cfg.classes, cfg.margin)
    shard_seed = rng.child("partition").derive_seed()
    shards = partition(train, cfg.devices, cfg.fraction, shard_seed)
    devices = [DeviceState(device_id=k, shard=shards[k],
                           head=init_task_head(cfg.classes, cfg.width))
               for k in range(cfg.devices)]
    return devices, test


def run_training(cfg: TrainingConfig, rng) -> TrainingResult:
    """Full run: T rounds, per-round evaluation, end-of-run accounting."""
    devices, test = init_devices(cfg, rng)
    model = init_split_model(rng.child("model-init"), cfg.d_x, cfg.width, cfg.layers,
                             cfg.rank, cfg.mode, cfg.scale, cfg.activation,
                             cfg.encoder_gain)
    records: list[RoundRecord] = []
    for t in range(1, cfg.rounds + 1):
        model, record = run_round(model, devices, cfg, rng, t, test=test)
        records.append(record)
    spends = []
    privacy = cfg.privacy_config()
    for dev in devices:
        if cfg.rounds == 0:
            spends.append(PrivacySpend(device=dev.device_id, realized_epsilon=0.0,
                                       binding=None, per_round_epsilon=[]))
            continue
        spend = account_rounds(dev.alphas, dev.hs, privacy, cfg.n0,
                               per_round_bindings=dev.bindings, device=dev.device_id)
        if (math.isfinite(privacy.epsilon_target)
                and spend.realized_epsilon > privacy.epsilon_target * (1 + 1e-9)):
            raise RuntimeError(
                f"privacy accounting violation for device {dev.device_id}: "
                f"{spend.realized_epsilon} > {privacy.epsilon_target}")
        spends.append(spend)
    return TrainingResult(records=records, model=model, devices=devices,
                          spends=spends, test=test)
