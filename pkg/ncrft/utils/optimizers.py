from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ncrft.models.models import OptimizerKind, OptimizerSettings
from ncrft.utils.errors import NumericError
from ncrft.utils.numerics import ParamStore


@dataclass
class OptimizerState:
    kind: OptimizerKind
    learning_rate: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # name -> {"velocity"} or {"m", "v"}
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0


def build_optimizer(settings: OptimizerSettings) -> OptimizerState:
    return OptimizerState(
        kind=settings.kind,
        learning_rate=settings.learning_rate,
        momentum=settings.momentum,
        beta1=settings.beta1,
        beta2=settings.beta2,
        epsilon=settings.epsilon,
    )


def decayed_learning_rate(initial: float, decay: float, epoch: int) -> float:
    """lr_e = lr_0 / (1 + decay * e), epochs counted from 0"""
    return initial / (1.0 + decay * epoch)


def optimizer_step(params: ParamStore, state: OptimizerState):
    """
    Apply one update to every parameter in place.

    sgd-momentum: velocity <- mu * velocity - lr * grad; value <- value + velocity
    adam: bias-corrected first/second moment update
    """
    for name, entry in params.items():
        if entry.grad is None:
            raise ValueError(f"Missing gradient for parameter {name}")
        if not np.all(np.isfinite(entry.grad)):
            raise NumericError(f"Non-finite gradient for parameter {name}")

    state.step += 1
    lr = state.learning_rate
    for name, entry in params.items():
        buffers = state.buffers.get(name)
        if state.kind == OptimizerKind.SGD_MOMENTUM:
            if buffers is None:
                buffers = state.buffers[name] = {"velocity": np.zeros_like(entry.value)}
            velocity = buffers["velocity"]
            velocity *= state.momentum
            velocity -= lr * entry.grad
            entry.value += velocity
        elif state.kind == OptimizerKind.ADAM:
            if buffers is None:
                buffers = state.buffers[name] = {
                    "m": np.zeros_like(entry.value),
                    "v": np.zeros_like(entry.value),
                }
            m, v = buffers["m"], buffers["v"]
            m *= state.beta1
            m += (1.0 - state.beta1) * entry.grad
            v *= state.beta2
            v += (1.0 - state.beta2) * entry.grad * entry.grad
            m_hat = m / (1.0 - state.beta1 ** state.step)
            v_hat = v / (1.0 - state.beta2 ** state.step)
            entry.value -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        else:
            raise ValueError(f"Unknown optimizer kind: {state.kind}")
