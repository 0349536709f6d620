"""AdamW with decoupled weight decay and per-group learning-rate multipliers."""
from logging import getLogger
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pcefusion.errors import DimensionError
from pcefusion.tensor import Tensor

logger = getLogger(__name__)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: Dict[str, list],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Apply one AdamW update in place.

    ``param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)``, where ``m_hat`` and ``v_hat`` are
    the bias-corrected first and second moment estimates. Parameters whose gradient is ``None`` are left alone.

    Args:
        params: Parameter arrays, updated in place.
        grads: Gradients aligned with ``params``.
        state: Optimizer state with keys "step" (List[int]), "m" and "v" (lists of arrays); empty on the first call.
        lr: The learning rate.
        betas: Decay rates of the moment estimates.
        eps: Denominator offset.
        weight_decay: Decoupled weight decay coefficient.
    """
    if not state:
        state["step"] = [0] * len(params)
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    beta1, beta2 = betas
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        m, v = state["m"][i], state["v"][i]
        if m.shape != param.shape:
            raise DimensionError(f"optimizer state {m.shape} does not match parameter {param.shape}")
        state["step"][i] += 1
        t = state["step"][i]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


class AdamW:
    """AdamW over parameter groups, each scaled by its own learning-rate multiplier.

    Attributes:
        groups (List[Tuple[List[Tensor], float]]): (parameters, learning-rate multiplier) pairs.
    """

    def __init__(
        self,
        groups: List[Tuple[List[Tensor], float]],
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.groups: List[Tuple[List[Tensor], float]] = groups
        self.betas: Tuple[float, float] = betas
        self.eps: float = eps
        self.weight_decay: float = weight_decay
        self._states: List[Dict[str, list]] = [{} for _ in groups]

    def step(self, lr: float) -> None:
        for (params, multiplier), state in zip(self.groups, self._states):
            adamw_step(
                [p.data for p in params],
                [p.grad if p.requires_grad else None for p in params],
                state,
                lr * multiplier,
                self.betas,
                self.eps,
                self.weight_decay,
            )

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for param in params:
                param.zero_grad()
