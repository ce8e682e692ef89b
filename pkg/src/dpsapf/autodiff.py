"""A small reverse-mode differentiation tape with exact per-sample gradients.

Values live either *per sample* (leading axis of length ``n_samples``) or
*shared* across samples (parameters, fixed projections). Samples never
interact inside a tape, so the adjoint of a shared parameter is kept per
sample instead of being summed: ``backward`` returns ``dL_i/dW`` for every
sample ``i`` at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class TapeError(RuntimeError):
    """Misuse of a tape (e.g. backward before any forward work)."""


class ShapeError(ValueError):
    pass


@dataclass
class _Node:
    value: np.ndarray
    batched: bool
    parents: tuple[int, ...] = ()
    backward: Callable[[np.ndarray], tuple] | None = None
    name: Hashable | None = None
    needs_grad: bool = False


@dataclass
class Tape:
    """Records primitives as they execute (define-by-run).

    ``record=False`` skips storing backward closures, for inference only.
    """

    n_samples: int
    record: bool = True
    nodes: list[_Node] = field(default_factory=list)

    # -- leaves -------------------------------------------------------------

    def param(self, name: Hashable, value: np.ndarray) -> int:
        """Shared leaf whose per-sample gradient is reported by ``backward``."""
        return self._push(np.asarray(value, dtype=np.float64), False, name=name)

    def constant(self, value: np.ndarray, batched: bool = False) -> int:
        value = np.asarray(value, dtype=np.float64)
        if batched and value.shape[:1] != (self.n_samples,):
            raise ShapeError(f"constant: leading axis {value.shape[:1]} != ({self.n_samples},)")
        return self._push(value, batched)

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def base_shape(self, node: int) -> tuple[int, ...]:
        n = self.nodes[node]
        return n.value.shape[1:] if n.batched else n.value.shape

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.shape[-1] != vb.shape[-2]:
            raise ShapeError(f"matmul: node {a} {self.base_shape(a)} x node {b} {self.base_shape(b)}")
        out = va @ vb

        need_a, need_b = self.nodes[a].needs_grad, self.nodes[b].needs_grad

        def back(g):
            ga = g @ np.swapaxes(vb, -1, -2) if need_a else None
            gb = np.swapaxes(va, -1, -2) @ g if need_b else None
            return ga, gb

        return self._op(out, (a, b), back)

    def transpose(self, a: int) -> int:
        return self._op(np.swapaxes(self.value(a), -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))

    def add(self, a: int, b: int) -> int:
        sa, sb = self.base_shape(a), self.base_shape(b)
        if len(sa) != len(sb):
            raise ShapeError(f"add: node {a} {sa} + node {b} {sb}")
        try:
            np.broadcast_shapes(sa, sb)
        except ValueError:
            raise ShapeError(f"add: node {a} {sa} + node {b} {sb}") from None
        out = self.value(a) + self.value(b)

        def back(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return self._op(out, (a, b), back)

    def scale(self, a: int, factor: float) -> int:
        return self._op(self.value(a) * factor, (a,), lambda g: (g * factor,))

    def softmax(self, a: int) -> int:
        """Softmax along the last axis, max-subtracted."""
        x = self.value(a)
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        y = z / z.sum(axis=-1, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._op(y, (a,), back)

    def gelu(self, a: int) -> int:
        """tanh-approximated GELU."""
        x = self.value(a)
        inner = _GELU_C * (x + 0.044715 * x * x * x)
        th = np.tanh(inner)
        y = 0.5 * x * (1.0 + th)

        def back(g):
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

        return self._op(y, (a,), back)

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        src = self.base_shape(a)
        if math.prod(src) != math.prod(shape):
            raise ShapeError(f"reshape: node {a} {src} -> {shape}")
        lead = (self.n_samples,) if self.nodes[a].batched else ()
        out = self.value(a).reshape(lead + tuple(shape))
        # Adjoints always carry the sample axis.
        return self._op(out, (a,), lambda g: (g.reshape((self.n_samples,) + src),))

    def concat(self, nodes: list[int], axis: int = 0) -> int:
        """Concatenate along a base axis; shared inputs are broadcast per sample."""
        shapes = [self.base_shape(n) for n in nodes]
        ndim = len(shapes[0])
        ax = axis % ndim
        for s in shapes[1:]:
            if len(s) != ndim or any(x != y for i, (x, y) in enumerate(zip(s, shapes[0])) if i != ax):
                raise ShapeError(f"concat: nodes {nodes} shapes {shapes}")
        if any(self.nodes[n].batched for n in nodes):
            parts = [self._per_sample(n) for n in nodes]
        else:
            parts = [self.value(n) for n in nodes]
        out = np.concatenate(parts, axis=ax - ndim)
        cuts = np.cumsum([s[ax] for s in shapes])[:-1]

        def back(g):
            return tuple(np.split(g, cuts, axis=ax + 1))

        return self._op(out, tuple(nodes), back)

    def mse(self, a: int, b: int) -> int:
        """Per-sample mean squared error; the result has an empty base shape."""
        sa, sb = self.base_shape(a), self.base_shape(b)
        if sa != sb:
            raise ShapeError(f"mse: node {a} {sa} vs node {b} {sb}")
        diff = self._per_sample(a) - self._per_sample(b)
        count = math.prod(sa)
        axes = tuple(range(1, diff.ndim))
        out = (diff**2).sum(axis=axes) / count

        def back(g):
            ga = g.reshape((-1,) + (1,) * len(sa)) * (2.0 / count) * diff
            return ga, -ga

        return self._op(out, (a, b), back, batched=True)

    # -- differentiation ----------------------------------------------------

    def backward(self, loss: int) -> dict[Hashable, np.ndarray]:
        """Per-sample gradients of ``loss`` for every ``param`` leaf.

        Returns ``{name: array of shape (n_samples, *param.shape)}``.
        """
        if not self.record:
            raise TapeError("tape was built with record=False")
        if not self.nodes or not 0 <= loss < len(self.nodes):
            raise TapeError("backward called before forward produced a loss node")
        if self.base_shape(loss) != () or not self.nodes[loss].batched:
            raise TapeError(f"node {loss} is not a per-sample scalar loss")
        adj: dict[int, np.ndarray] = {loss: np.ones(self.n_samples)}
        grads: dict[Hashable, np.ndarray] = {}
        for idx in range(loss, -1, -1):
            g = adj.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.name is not None:
                grads[node.name] = g
                continue
            if node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if not self.nodes[parent].needs_grad:
                    continue
                pg = self._adjoint_shape(parent, pg)
                if parent in adj:
                    adj[parent] = adj[parent] + pg
                else:
                    adj[parent] = pg
        for idx, node in enumerate(self.nodes[: loss + 1]):
            if node.name is not None and node.name not in grads:
                grads[node.name] = np.zeros((self.n_samples,) + node.value.shape)
        return grads

    # -- internals ----------------------------------------------------------

    def _push(self, value, batched, parents=(), backward=None, name=None) -> int:
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced at node {len(self.nodes)}")
        needs = self.record and (name is not None or any(self.nodes[p].needs_grad for p in parents))
        self.nodes.append(_Node(value, batched, parents, backward if needs else None, name, needs))
        return len(self.nodes) - 1

    def _op(self, out, parents, back, batched=None) -> int:
        if batched is None:
            batched = any(self.nodes[p].batched for p in parents)
        return self._push(out, batched, parents, back)

    def _per_sample(self, node: int) -> np.ndarray:
        n = self.nodes[node]
        if n.batched:
            return n.value
        return np.broadcast_to(n.value, (self.n_samples,) + n.value.shape)

    def _adjoint_shape(self, node: int, g: np.ndarray) -> np.ndarray:
        want = (self.n_samples,) + self.base_shape(node)
        if g.shape == want:
            return g
        if g.shape == want[1:]:
            # Shared-only subgraph: tile the adjoint across samples.
            return np.broadcast_to(g, want).copy()
        return _unbroadcast(np.broadcast_to(g, np.broadcast_shapes(g.shape, want)), want[1:])


def _unbroadcast(g: np.ndarray, base: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` (sample axis first) down to ``(n_samples, *base)``."""
    extra = g.ndim - 1 - len(base)
    if extra > 0:
        g = g.sum(axis=tuple(range(1, 1 + extra)))
    axes = tuple(i + 1 for i, d in enumerate(base) if d == 1 and g.shape[i + 1] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g
