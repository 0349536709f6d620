"""Finite-difference gradient checking."""
from logging import getLogger
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from pcefusion import tensor as T
from pcefusion.tensor import Tensor

logger = getLogger(__name__)


def numeric_gradients(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], entries: Sequence[Tuple[int, int]], h: float = 1e-5
) -> np.ndarray:
    """Central differences ``(f(x + h) - f(x - h)) / 2h`` at the given (parameter, flat index) entries."""
    values = []
    with T.no_grad():
        for p, i in entries:
            flat = params[p].data.reshape(-1)
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn().item()
            flat[i] = original - h
            minus = loss_fn().item()
            flat[i] = original
            values.append((plus - minus) / (2.0 * h))
    return np.array(values)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    num_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare :func:`pcefusion.tensor.backward` against central differences.

    Args:
        loss_fn: Rebuilds the scalar loss from the current parameter values.
        params: Leaf tensors with ``requires_grad``.
        h: The finite-difference step.
        num_entries: The number of randomly chosen entries to check; all entries when None.
        seed: Seeds the entry choice.

    Returns:
        The norm-wise relative error ``|g_a - g_n| / (|g_a| + |g_n|)`` over the checked entries (0 when both vanish).
    """
    for p in params:
        p.zero_grad()
    T.clear_graph()
    T.backward(loss_fn())
    T.clear_graph()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    entries: List[Tuple[int, int]] = [(p, i) for p, param in enumerate(params) for i in range(param.size)]
    if num_entries is not None and num_entries < len(entries):
        rng = np.random.default_rng(seed)
        entries = [entries[k] for k in sorted(rng.choice(len(entries), size=num_entries, replace=False))]

    expected = np.array([analytic[p].reshape(-1)[i] for p, i in entries])
    numeric = numeric_gradients(loss_fn, params, entries, h)
    scale = np.linalg.norm(expected) + np.linalg.norm(numeric)
    error = 0.0 if scale == 0.0 else float(np.linalg.norm(expected - numeric) / scale)
    logger.debug(f"Gradient check over {len(entries)} entries: relative error {error:.3e}.")
    return error
