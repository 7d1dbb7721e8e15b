"""Desk-scale split network with manual forward and backward passes.

The device side holds a frozen linear embedding and a per-device softmax
task head; the server side holds a stack of frozen linear encoder layers,
each with a parallel low-rank adapter, and an elementwise activation
between layers (none after the last). Gradients are computed analytically
and the tests hold every one of them to central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lora import LoraAdapter, UpdateMode, grad_wrt_a, grad_wrt_b, init_adapter, lora_forward
from .numerics import RngStream, as_matrix, as_vector, orthonormal_rows, singular_extremes

ACTIVATIONS = ("tanh", "relu", "identity")


def activation_fn(name: str, v: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(v)
    if name == "relu":
        return np.maximum(v, 0.0)
    if name == "identity":
        return v
    raise ValueError(f"unknown activation {name!r}")


def activation_deriv(name: str, v: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - np.tanh(v) ** 2
    if name == "relu":
        return (v > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(v)
    raise ValueError(f"unknown activation {name!r}")


def _frozen(x: np.ndarray) -> np.ndarray:
    # always copy so freezing never mutates the caller's array flags
    out = np.array(x, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TaskHead:
    """Affine softmax classifier on the encoder output."""

    w: np.ndarray     # (classes, width)
    bias: np.ndarray  # (classes,)

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(self.w))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.w.shape[0] != self.bias.shape[0]:
            raise ValueError("head weight and bias disagree on class count")

    def logits(self, z) -> np.ndarray:
        return self.w @ as_vector(z) + self.bias


@dataclass(frozen=True)
class SplitModel:
    """Frozen embedding and encoder plus the trainable adapters.

    The embedding and encoder arrays are write-protected; adapters are
    replaced as values by updates, never mutated.
    """

    w_embed: np.ndarray
    encoder: tuple[np.ndarray, ...]
    adapters: tuple[LoraAdapter, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "w_embed", _frozen(self.w_embed))
        object.__setattr__(self, "encoder", tuple(_frozen(w) for w in self.encoder))
        object.__setattr__(self, "adapters", tuple(self.adapters))
        if len(self.encoder) != len(self.adapters):
            raise ValueError("one adapter per encoder layer required")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.encoder)

    @property
    def width(self) -> int:
        return self.w_embed.shape[0]

    def with_adapters(self, adapters) -> "SplitModel":
        return SplitModel(w_embed=self.w_embed, encoder=self.encoder,
                          adapters=tuple(adapters), activation=self.activation)


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the backward pass needs from one sample's forward pass."""

    z_e: np.ndarray
    inputs: tuple[np.ndarray, ...]   # u per layer
    preacts: tuple[np.ndarray, ...]  # v per layer
    z: np.ndarray


def init_split_model(rng: RngStream, d_x: int, width: int, layers: int, rank: int,
                     mode: UpdateMode, scale: float = 1.0, activation: str = "tanh",
                     encoder_gain: float = 1.0) -> SplitModel:
    """Random frozen network: norm-preserving embedding, orthogonal encoder.

    The embedding is an isometry when width >= d_x (orthonormal columns)
    and an orthonormal-row projection otherwise. Encoder layers are random
    orthogonal matrices times ``encoder_gain``, which sets the scale of the
    frozen weights relative to the adapter updates.
    """
    if encoder_gain <= 0:
        raise ValueError("encoder_gain must be positive")
    if width >= d_x:
        w_embed = orthonormal_rows(rng.child("embed"), d_x, width, 1.0).T
    else:
        w_embed = orthonormal_rows(rng.child("embed"), width, d_x, 1.0)
    enc = [encoder_gain * orthonormal_rows(rng.child("encoder", i), width, width, 1.0)
           for i in range(layers)]
    adapters = [init_adapter(mode, rank, width, width, scale, rng.child("adapter", i))
                for i in range(layers)]
    return SplitModel(w_embed=w_embed, encoder=tuple(enc), adapters=tuple(adapters),
                      activation=activation)


def init_task_head(classes: int, width: int) -> TaskHead:
    """Zero head: uniform predictions until the first local step."""
    return TaskHead(w=np.zeros((classes, width)), bias=np.zeros(classes))


def embed(model: SplitModel, x) -> np.ndarray:
    """Frozen linear embedding of one raw feature vector."""
    x = as_vector(x)
    if x.shape[0] != model.w_embed.shape[1]:
        raise ValueError(f"input dim {x.shape[0]} != embedding dim {model.w_embed.shape[1]}")
    return model.w_embed @ x


def encoder_forward(model: SplitModel, z_e) -> tuple[np.ndarray, ForwardTrace]:
    """Run the adapter-augmented encoder, keeping per-layer inputs."""
    u = as_vector(z_e)
    inputs, preacts = [], []
    for i in range(model.n_layers):
        inputs.append(u)
        v = lora_forward(model.encoder[i], model.adapters[i], u)
        preacts.append(v)
        u = activation_fn(model.activation, v) if i < model.n_layers - 1 else v
    trace = ForwardTrace(z_e=as_vector(z_e), inputs=tuple(inputs),
                         preacts=tuple(preacts), z=u)
    return u, trace


def softmax_stats(head: TaskHead, z, label: int):
    """Loss, probabilities and the output-gradient pieces for one sample."""
    z = as_vector(z)
    if not 0 <= label < head.w.shape[0]:
        raise ValueError(f"label {label} outside {head.w.shape[0]} classes")
    logits = head.logits(z)
    shifted = logits - np.max(logits)
    log_norm = float(np.log(np.sum(np.exp(shifted))))
    loss = log_norm - float(shifted[label])
    p = np.exp(shifted - log_norm)
    err = p.copy()
    err[label] -= 1.0
    return loss, p, err


def task_loss(head: TaskHead, z, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its exact gradient w.r.t. the encoder output."""
    loss, _, err = softmax_stats(head, z, label)
    return loss, head.w.T @ err


def head_gradients(head: TaskHead, z, label: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. the head weight and bias."""
    _, _, err = softmax_stats(head, z, label)
    return np.outer(err, as_vector(z)), err


def task_head_step(head: TaskHead, z, label: int, eta_local: float) -> TaskHead:
    """One plain gradient step of the head on a single sample."""
    if eta_local < 0:
        raise ValueError("eta_local must be nonnegative")
    gw, gb = head_gradients(head, z, label)
    return TaskHead(w=head.w - eta_local * gw, bias=head.bias - eta_local * gb)


@dataclass
class AdamState:
    """Adam moments for a task head; the config-selectable local optimizer."""

    m_w: np.ndarray
    v_w: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    step: int = 0

    @classmethod
    def for_head(cls, head: TaskHead) -> "AdamState":
        return cls(m_w=np.zeros_like(head.w), v_w=np.zeros_like(head.w),
                   m_b=np.zeros_like(head.bias), v_b=np.zeros_like(head.bias))


def adam_head_step(head: TaskHead, state: AdamState, gw, gb, eta: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> TaskHead:
    """One Adam step on the head parameters; mutates ``state``."""
    state.step += 1
    state.m_w = beta1 * state.m_w + (1 - beta1) * gw
    state.v_w = beta2 * state.v_w + (1 - beta2) * gw * gw
    state.m_b = beta1 * state.m_b + (1 - beta1) * gb
    state.v_b = beta2 * state.v_b + (1 - beta2) * gb * gb
    bias1 = 1 - beta1 ** state.step
    bias2 = 1 - beta2 ** state.step
    w = head.w - eta * (state.m_w / bias1) / (np.sqrt(state.v_w / bias2) + eps)
    b = head.bias - eta * (state.m_b / bias1) / (np.sqrt(state.v_b / bias2) + eps)
    return TaskHead(w=w, bias=b)


def backprop_to_adapters(model: SplitModel, trace: ForwardTrace, g_hat,
                         ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Chain rule from the encoder-output gradient to every adapter.

    g_hat is whatever vector arrived for this sample (possibly noisy); the
    backward pass pushes it through the frozen layers and activation
    derivatives, producing (grad_a, grad_b) per layer.
    """
    delta = as_vector(g_hat)
    if delta.shape[0] != model.width:
        raise ValueError(f"gradient dim {delta.shape[0]} != encoder width {model.width}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * model.n_layers  # type: ignore
    for i in range(model.n_layers - 1, -1, -1):
        ad = model.adapters[i]
        u = trace.inputs[i]
        grads[i] = (grad_wrt_a(ad.b, delta, u), grad_wrt_b(delta, u, ad.a))
        if i > 0:
            w_eff = model.encoder[i] + ad.b @ ad.a
            delta = w_eff.T @ delta
            delta = activation_deriv(model.activation, trace.preacts[i - 1]) * delta
    return grads


def downstream_jacobian(model: SplitModel, trace: ForwardTrace, layer: int) -> np.ndarray:
    """Explicit Jacobian of the encoder output w.r.t. layer ``layer``'s output."""
    if not 0 <= layer < model.n_layers:
        raise ValueError(f"layer {layer} out of range")
    # d z / d v_layer as the ordered product of per-layer factors
    out = np.eye(model.width)
    for j in range(model.n_layers - 1, layer, -1):
        ad = model.adapters[j]
        w_eff = model.encoder[j] + ad.b @ ad.a
        out = out @ (w_eff @ np.diag(activation_deriv(model.activation, trace.preacts[j - 1])))
    return out


def jacobian_condition(model: SplitModel, trace: ForwardTrace, layer: int) -> float:
    """Condition number of the map that carries encoder-output noise down
    to the signal entering layer ``layer``'s adapter gradients."""
    jac = downstream_jacobian(model, trace, layer)
    _, _, kappa = singular_extremes(jac)
    return kappa
