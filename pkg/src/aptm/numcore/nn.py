"""Parameter containers and the few layers every encoder is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import core as T
from .core import Tensor


class CheckpointMismatch(ValueError):
    """State dict and module disagree on names or shapes."""

    def __init__(self, diffs: list[str]):
        self.diffs = diffs
        super().__init__("checkpoint does not match model:\n  " + "\n  ".join(diffs))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.get_dtype()), requires_grad=True)


class Module:
    """Minimal module tree: parameters are leaf tensors found by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad and value.is_leaf:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        diffs = []
        for name, p in own.items():
            if name not in state:
                if strict:
                    diffs.append(f"missing {name} {p.shape}")
            elif tuple(state[name].shape) != p.shape:
                diffs.append(f"shape {name}: model {p.shape} vs checkpoint {tuple(state[name].shape)}")
        if strict:
            diffs += [f"unexpected {k} {tuple(v.shape)}" for k, v in state.items()
                      if k not in own and not k.startswith(("optim.", "state."))]
        if diffs:
            raise CheckpointMismatch(diffs)
        for name, p in own.items():
            if name in state:
                p.data = np.array(state[name], dtype=p.data.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return self(T.reshape(x, (1, -1))).reshape(-1)
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.weight = parameter(trunc_normal(rng, (num, dim)))

    def __call__(self, ids) -> Tensor:
        return T.getitem(self.weight, np.asarray(ids, dtype=np.int64))
