"""Parameter containers built on :mod:`pcefusion.tensor`."""
from logging import getLogger
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from pcefusion import tensor as T
from pcefusion.errors import DimensionError
from pcefusion.tensor import Tensor

logger = getLogger(__name__)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """A Glorot-uniform initialized ``fan_in x fan_out`` parameter."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """A named collection of parameter tensors and child modules.

    Every public attribute holding a :class:`Tensor`, a :class:`Module`, or a list of modules takes part in
    :meth:`named_parameters`, whether or not the tensor currently requires gradients.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor):
                yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def trainable_parameters(self) -> List[Tensor]:
        return [param for param in self.parameters() if param.requires_grad]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def freeze(self) -> None:
        """Stop gradient accumulation into every parameter of this module."""
        for param in self.parameters():
            param.requires_grad = False

    def num_parameters(self) -> int:
        return int(sum(param.size for param in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into the parameters of this module.

        Raises:
            DimensionError: If a parameter is missing or its shape differs from the stored array.
        """
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise DimensionError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
        for name, param in params.items():
            if state[name].shape != param.shape:
                raise DimensionError(f"parameter {name}: expected shape {param.shape}, got {state[name].shape}")
            param.data = np.array(state[name], dtype=T.DTYPE)


class Linear(Module):
    """An affine map ``x W + b`` over the last axis."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True):
        self.weight = glorot(rng, in_dim, out_dim)
        if bias:
            self.bias = zeros(out_dim)
        self._has_bias = bias

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear expects width {self.in_dim}, got input of shape {x.shape}")
        out = T.matmul(x, self.weight)
        return out + self.bias if self._has_bias else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = ones(dim)
        self.bias = zeros(dim)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class MLP(Module):
    """Stacked linear layers with rectified-linear activations between them and none on the output.

    Attributes:
        layers (List[Linear]): One linear layer per entry of ``dims`` after the input width.
    """

    def __init__(self, rng: np.random.Generator, in_dim: int, dims: Sequence[int]):
        widths = [in_dim] + list(dims)
        self.layers: List[Linear] = [Linear(rng, widths[i], widths[i + 1]) for i in range(len(dims))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x
