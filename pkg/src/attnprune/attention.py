"""Channel attention gate placed in front of a prunable layer.

Pipeline for a conv target: depthwise conv -> GAP -> FC -> batch norm -> ReLU
-> softmax -> multiply by the mitigation factor -> clipped ReLU (ceiling 1).
The resulting gate scales the layer's input channel-wise. FC targets skip the
depthwise conv and GAP stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .errors import DimensionError, InvalidInputError

VARIANTS = ("softmax", "sigmoid")


def mitigation(channels: int, alpha: float) -> float:
    """``C / (1 + alpha * (C - 1))``: C at alpha=0, 1 at alpha=1."""
    if channels < 1:
        raise InvalidInputError("channel count must be >= 1")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    return channels / (1.0 + alpha * (channels - 1))


@dataclass
class AttentionModuleState:
    layer_id: str
    channels: int
    fc_mode: bool
    fc_weight: Tensor
    fc_bias: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_running_mean: Tensor
    bn_running_var: Tensor
    dw_kernel: Tensor | None = None
    variant: str = "softmax"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def parameters(self) -> list[Tensor]:
        ps = [self.fc_weight, self.fc_bias, self.bn_gamma, self.bn_beta]
        if self.dw_kernel is not None:
            ps.insert(0, self.dw_kernel)
        return ps

    def named_tensors(self) -> dict[str, Tensor]:
        named = {
            "fc_weight": self.fc_weight,
            "fc_bias": self.fc_bias,
            "bn_gamma": self.bn_gamma,
            "bn_beta": self.bn_beta,
            "bn_running_mean": self.bn_running_mean,
            "bn_running_var": self.bn_running_var,
        }
        if self.dw_kernel is not None:
            named["dw_kernel"] = self.dw_kernel
        return named

    @property
    def kernel_size(self) -> int | None:
        return None if self.dw_kernel is None else self.dw_kernel.shape[-1]


def init_attention_state(
    layer_id,
    channels,
    fc_mode=False,
    rng=None,
    dtype=np.float32,
    kernel_size=3,
    dw_std=0.01,
    bn_beta_init=0.5,
    bn_gamma_init=1.0,
    variant="softmax",
) -> AttentionModuleState:
    """Fresh module whose gate is exactly uniform until training moves it.

    FC weight and bias start at zero, so every channel gets the same logit and
    the softmax is uniform. The batch-norm offset starts at a positive constant
    so the following ReLU is not sitting on its kink (where its derivative is
    zero and no gradient would ever reach the module).
    """
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown attention variant {variant!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    c = channels

    def t(a, grad=True):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=grad)

    dw = None
    if not fc_mode:
        dw = t(rng.normal(0.0, dw_std, size=(c, 1, kernel_size, kernel_size)))
    return AttentionModuleState(
        layer_id=layer_id,
        channels=c,
        fc_mode=fc_mode,
        dw_kernel=dw,
        fc_weight=t(np.zeros((c, c))),
        fc_bias=t(np.zeros(c)),
        bn_gamma=t(np.full(c, bn_gamma_init)),
        bn_beta=t(np.full(c, bn_beta_init)),
        bn_running_mean=t(np.zeros(c), grad=False),
        bn_running_var=t(np.ones(c), grad=False),
        variant=variant,
    )


def attention_logits(x: Tensor, state: AttentionModuleState, training=False) -> Tensor:
    """Everything up to (and including) the ReLU before the softmax."""
    expect = 2 if state.fc_mode else 4
    if x.ndim != expect or x.shape[1] != state.channels:
        shape = "N x C" if state.fc_mode else "N x C x H x W"
        raise DimensionError(f"attention[{state.layer_id}]", f"{shape} with C={state.channels}", x.shape)
    h = x
    if not state.fc_mode:
        k = state.dw_kernel.shape[-1]
        h = ops.depthwise_conv2d(h, state.dw_kernel, padding=k // 2, name=f"attention[{state.layer_id}].dw")
        h = ops.global_average_pool(h)
    h = ops.linear(h, state.fc_weight, state.fc_bias, name=f"attention[{state.layer_id}].fc")
    h = ops.batchnorm(
        h,
        state.bn_gamma,
        state.bn_beta,
        state.bn_running_mean,
        state.bn_running_var,
        training=training,
        momentum=state.bn_momentum,
        eps=state.bn_eps,
    )
    return ops.relu(h)


def attention_gate(z: Tensor, state: AttentionModuleState, alpha: float):
    """Map pre-softmax logits to ``(gate, s)``; ``s`` feeds the statistics."""
    if state.variant == "sigmoid":
        s = ops.sigmoid(z)
        return s, s
    s = ops.softmax(z)
    gate = ops.clipped_relu(ops.scale(s, mitigation(state.channels, alpha)), 1.0)
    return gate, s


def attention_forward(x: Tensor, state: AttentionModuleState, alpha: float, training=False):
    """Returns ``(scaled, s)``: the gated input and the softmax output."""
    z = attention_logits(x, state, training)
    gate, s = attention_gate(z, state, alpha)
    return ops.channel_scale(x, gate), s


def probabilities64(z: Tensor, variant="softmax") -> np.ndarray:
    """Double-precision softmax (or sigmoid) of ``z`` for statistics.

    Rows sum to one at float64 accuracy even when the network runs in float32.
    """
    v = np.asarray(z.data, dtype=np.float64)
    if variant == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * v))
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class MitigationSchedule:
    """Linear alpha ramp from 0 to ``alpha_target`` over ``warmup_steps``,
    then constant for ``hold_steps``."""

    alpha_target: float
    warmup_steps: int
    hold_steps: int = 0
    step_counter: int = field(default=0)

    def __post_init__(self):
        if not 0.0 <= self.alpha_target <= 1.0:
            raise InvalidInputError("alpha_target must lie in [0, 1]")
        if self.warmup_steps < 0 or self.hold_steps < 0:
            raise InvalidInputError("schedule step counts must be non-negative")

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.hold_steps

    def current(self) -> float:
        return alpha_at(self, self.step_counter)

    def advance(self) -> float:
        self.step_counter += 1
        return self.current()


def alpha_at(schedule: MitigationSchedule, step: int) -> float:
    if step < 0:
        raise InvalidInputError("step must be non-negative")
    if schedule.warmup_steps == 0 or step >= schedule.warmup_steps:
        return schedule.alpha_target
    return schedule.alpha_target * step / schedule.warmup_steps
