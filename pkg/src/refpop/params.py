"""Named parameter segments with a flat view, plus the Adam optimizer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class ParameterStore:
    """Ordered collection of named float64 segments (leaf Tensors).

    The flat view concatenates all segments in declaration order, which is
    what the optimizer state aligns with and what checkpoints serialize.
    """

    def __init__(self):
        self._segments: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._segments:
            raise ValueError(f"duplicate parameter segment '{name}'")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._segments[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._segments

    def __getitem__(self, name: str) -> Tensor:
        return self._segments[name]

    def names(self) -> list[str]:
        return list(self._segments)

    def tensors(self) -> dict[str, Tensor]:
        """Name -> leaf Tensor mapping, usable directly in forward passes."""
        return dict(self._segments)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: t.data.shape for n, t in self._segments.items()}

    @property
    def total_size(self) -> int:
        return sum(t.data.size for t in self._segments.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._segments.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_size,):
            raise ValueError(f"flat vector length {vec.size} != store size {self.total_size}")
        offset = 0
        for t in self._segments.values():
            n = t.data.size
            t.data = vec[offset:offset + n].reshape(t.data.shape).copy()
            offset += n

    def frozen(self) -> dict[str, Tensor]:
        """Constant (non-trainable) view sharing the same arrays."""
        return {n: Tensor(t.data) for n, t in self._segments.items()}

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """Split a flat vector back into per-segment arrays."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_size,):
            raise ValueError(f"flat vector length {vec.size} != store size {self.total_size}")
        out = {}
        offset = 0
        for name, t in self._segments.items():
            n = t.data.size
            out[name] = vec[offset:offset + n].reshape(t.data.shape).copy()
            offset += n
        return out

    def flatten_grads(self, grads: dict[str, Tensor | np.ndarray]) -> np.ndarray:
        parts = []
        for name, t in self._segments.items():
            g = grads.get(name)
            if g is None:
                parts.append(np.zeros(t.data.size))
            else:
                arr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
                if arr.shape != t.data.shape:
                    raise ValueError(
                        f"gradient for '{name}' has shape {arr.shape}, expected {t.data.shape}"
                    )
                parts.append(arr.ravel())
        return np.concatenate(parts)

    def clone(self) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self._segments.items():
            out.add(name, t.data.copy())
        return out

    def copy_from(self, other: "ParameterStore") -> None:
        if self.names() != other.names():
            raise ValueError("parameter stores have different segment layouts")
        for name in self._segments:
            self._segments[name].data = other[name].data.copy()

    def value_equal(self, other: "ParameterStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n].data, other[n].data) for n in self._segments
        )

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for name, t in self._segments.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class AdamState:
    """Adam moments aligned with a store's flat view."""

    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)


def adam_step(store: ParameterStore, grads: dict[str, Tensor | np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Deterministic given inputs."""
    g = store.flatten_grads(grads)
    if g.size != state.size:
        raise ValueError(f"gradient size {g.size} != optimizer state size {state.size}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    store.set_flat(store.flat() - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
