"""Parameter containers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within +-bound*std."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Holds named parameters (``Tensor`` attributes) and child modules.

    ``named_parameters`` walks attributes recursively and returns the dotted
    names in lexicographic order, which is the ParamSet iteration order used
    by the optimizer and checkpoint writer.
    """

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        found: dict[str, Tensor] = {}
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                found[name] = value
            else:
                found.update(value.named_parameters(name + "."))
        return dict(sorted(found.items()))

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        wrong = sorted(k for k in params.keys() & arrays.keys() if params[k].shape != arrays[k].shape)
        if missing or extra or wrong:
            parts = []
            if missing:
                parts.append(f"missing {missing}")
            if extra:
                parts.append(f"unexpected {extra}")
            if wrong:
                parts.append(
                    "shape mismatch "
                    + ", ".join(f"{k}: {arrays[k].shape} vs {params[k].shape}" for k in wrong)
                )
            raise ValueError("parameter set does not match architecture: " + "; ".join(parts))
        for k, p in params.items():
            p.data = np.array(arrays[k], copy=True)
            p.grad = None


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)
