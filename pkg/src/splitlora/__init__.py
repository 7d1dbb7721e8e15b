"""Split federated LoRA fine-tuning over noisy wireless uplinks.

A deterministic desk-scale simulator in which the uplink channel noise
doubles as the differential-privacy mechanism. The library exposes the
adapter algebra, channel and privacy accounting, the split model, the
federated round loop, and a CLI harness for (mode, epsilon) grids.
"""

from .channel import ChannelState, FadingModel, draw_channel, equalize, power_ok, snr, transmit_uplink
from .data import Dataset, generate, partition
from .federation import (
    DeviceState,
    RoundRecord,
    TrainingConfig,
    TrainingResult,
    aggregate,
    run_round,
    run_training,
)
from .lora import (
    LoraAdapter,
    NoiseDecomposition,
    UpdateMode,
    apply_update,
    grad_wrt_a,
    grad_wrt_b,
    init_adapter,
    lora_forward,
    noise_energy_fixed_a,
    noise_in_delta_w_both,
    noise_in_delta_w_fixed_a,
)
from .model import (
    ForwardTrace,
    SplitModel,
    TaskHead,
    backprop_to_adapters,
    embed,
    encoder_forward,
    init_split_model,
    init_task_head,
    jacobian_condition,
    task_head_step,
    task_loss,
)
from .numerics import RngStream, frobenius_energy, orthonormal_rows, sample_gaussian, singular_extremes
from .privacy import (
    Binding,
    PrivacyConfig,
    PrivacySpend,
    account_rounds,
    clip_gradient,
    epsilon_from_sigma,
    epsilon_from_snr,
    power_control_alpha,
    with_strong_composition,
)

__version__ = "0.1.0"
