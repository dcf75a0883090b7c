"""Named trainable parameter collections.

Weights use fan-in-scaled normal (He) initialization when an RNG is supplied;
passing rng=None zero-initializes everything, which the closed-form tests
rely on. Biases start at zero either way.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError


def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = math.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k))


def he_linear(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    std = math.sqrt(2.0 / n_in)
    return rng.normal(0.0, std, size=(n_out, n_in))


class ParamStore:
    """Ordered name -> Tensor registry for one model."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def conv(self, name: str, c_in: int, c_out: int, k: int,
             rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        w = he_conv(rng, c_out, c_in, k) if rng is not None else np.zeros((c_out, c_in, k, k))
        return (self.add(f"{name}.w", w), self.add(f"{name}.b", np.zeros(c_out)))

    def linear(self, name: str, n_in: int, n_out: int,
               rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        w = he_linear(rng, n_out, n_in) if rng is not None else np.zeros((n_out, n_in))
        return (self.add(f"{name}.w", w), self.add(f"{name}.b", np.zeros(n_out)))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def named(self) -> dict[str, Tensor]:
        return dict(self._params)

    def trainable(self) -> list[Tensor]:
        return [t for t in self._params.values() if t.requires_grad]

    def freeze(self) -> None:
        for t in self._params.values():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractError(
                f"parameter names mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in arrays.items():
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ContractError(
                    f"parameter {name!r}: shape {arr.shape} != expected {t.data.shape}")
            t.data = np.asarray(arr, dtype=np.float64).copy()
