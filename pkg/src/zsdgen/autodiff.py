"""Reverse-mode automatic differentiation over dense 2-D float64 tensors.

Define-by-run tape: recording an operation computes its value eagerly and
appends a node; `backward` walks the tape once in reverse and accumulates
adjoints for every parameter node. The op set is deliberately small (what a
handful of MLPs plus their losses need), and every op works on 2-D arrays
only, so shapes stay easy to reason about.

`input_gradient` builds the analytic gradient of a scalar-per-row output
with respect to one of its inputs as *new tape nodes*. A gradient-norm
penalty built from that expression can then be differentiated with respect
to network parameters by the ordinary first-order `backward`, so no
second-order tape is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray
NodeId = int

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's contract."""


class GradientRuleError(ValueError):
    """Raised when `input_gradient` meets an op without an input-Jacobian rule."""


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite gradient reaches an optimizer step."""


def _as_2d(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"tensors must be 2-D, got shape {arr.shape}")
    return arr


def _binary_shape(op: str, a: tuple, b: tuple) -> tuple:
    """Result shape for elementwise binary ops.

    Equal shapes, or one operand may be a broadcast row (1,k) or column
    (n,1) of the other.
    """
    if a == b:
        return a
    if a[1] == b[1] and (a[0] == 1 or b[0] == 1):
        return (max(a[0], b[0]), a[1])
    if a[0] == b[0] and (a[1] == 1 or b[1] == 1):
        return (a[0], max(a[1], b[1]))
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform")


def _reduce_to(grad: Array, shape: tuple) -> Array:
    """Sum `grad` over axes that were broadcast to reach its shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


class Tape:
    """Append-only record of operations; acyclic because inputs precede outputs."""

    __slots__ = ("_ops", "_inputs", "_values", "_aux", "_params", "_adjoints")

    def __init__(self) -> None:
        self._ops: list[str] = []
        self._inputs: list[tuple[NodeId, ...]] = []
        self._values: list[Array] = []
        self._aux: list = []
        self._params: set[NodeId] = set()
        self._adjoints: list = []

    def __len__(self) -> int:
        return len(self._ops)

    def value(self, node: NodeId) -> Array:
        return self._values[node]

    def op(self, node: NodeId) -> str:
        return self._ops[node]

    def is_parameter(self, node: NodeId) -> bool:
        return node in self._params

    def _append(self, op: str, inputs: tuple[NodeId, ...], value: Array, aux=None) -> NodeId:
        node = len(self._ops)
        for i in inputs:
            if not 0 <= i < node:
                raise ValueError(f"{op}: input id {i} is not an existing node")
        self._ops.append(op)
        self._inputs.append(inputs)
        self._values.append(value)
        self._aux.append(aux)
        return node

    # --- leaves ---

    def constant(self, value) -> NodeId:
        return self._append("constant", (), _as_2d(value))

    def parameter(self, value) -> NodeId:
        node = self._append("parameter", (), _as_2d(value))
        self._params.add(node)
        return node

    # --- elementwise binary ---

    def add(self, a: NodeId, b: NodeId) -> NodeId:
        _binary_shape("add", self._values[a].shape, self._values[b].shape)
        return self._append("add", (a, b), self._values[a] + self._values[b])

    def sub(self, a: NodeId, b: NodeId) -> NodeId:
        _binary_shape("sub", self._values[a].shape, self._values[b].shape)
        return self._append("sub", (a, b), self._values[a] - self._values[b])

    def mul(self, a: NodeId, b: NodeId) -> NodeId:
        _binary_shape("mul", self._values[a].shape, self._values[b].shape)
        return self._append("mul", (a, b), self._values[a] * self._values[b])

    def div(self, a: NodeId, b: NodeId) -> NodeId:
        _binary_shape("div", self._values[a].shape, self._values[b].shape)
        denom = self._values[b]
        if np.any(denom == 0.0):
            raise ValueError("div: zero entry in denominator")
        return self._append("div", (a, b), self._values[a] / denom)

    # --- structural / linear ---

    def scale(self, a: NodeId, factor: float) -> NodeId:
        return self._append("scale", (a,), self._values[a] * float(factor), float(factor))

    def matmul(self, a: NodeId, b: NodeId) -> NodeId:
        sa, sb = self._values[a].shape, self._values[b].shape
        if sa[1] != sb[0]:
            raise ShapeError(f"matmul: inner dims differ, {sa} @ {sb}")
        return self._append("matmul", (a, b), self._values[a] @ self._values[b])

    def transpose(self, a: NodeId) -> NodeId:
        return self._append("transpose", (a,), self._values[a].T.copy())

    def concat_cols(self, a: NodeId, b: NodeId) -> NodeId:
        sa, sb = self._values[a].shape, self._values[b].shape
        if sa[0] != sb[0]:
            raise ShapeError(f"concat_cols: row counts differ, {sa} vs {sb}")
        value = np.concatenate([self._values[a], self._values[b]], axis=1)
        return self._append("concat_cols", (a, b), value, sa[1])

    # --- pointwise nonlinear ---

    def relu(self, a: NodeId) -> NodeId:
        return self._append("relu", (a,), np.maximum(self._values[a], 0.0))

    def leaky_relu(self, a: NodeId) -> NodeId:
        x = self._values[a]
        return self._append("leaky_relu", (a,), np.where(x > 0.0, x, LEAKY_SLOPE * x))

    def tanh(self, a: NodeId) -> NodeId:
        return self._append("tanh", (a,), np.tanh(self._values[a]))

    def square(self, a: NodeId) -> NodeId:
        return self._append("square", (a,), np.square(self._values[a]))

    def sqrt(self, a: NodeId) -> NodeId:
        x = self._values[a]
        if np.any(x < 0.0):
            raise ValueError("sqrt: negative entry")
        return self._append("sqrt", (a,), np.sqrt(x))

    def log(self, a: NodeId) -> NodeId:
        x = self._values[a]
        if np.any(x <= 0.0):
            raise ValueError(f"log: non-positive entry (min {x.min():g})")
        return self._append("log", (a,), np.log(x))

    # --- reductions / rowwise ---

    def row_mean(self, a: NodeId) -> NodeId:
        return self._append("row_mean", (a,), self._values[a].mean(axis=0, keepdims=True))

    def sum(self, a: NodeId) -> NodeId:
        return self._append("sum", (a,), self._values[a].sum().reshape(1, 1))

    def softmax_rows(self, a: NodeId) -> NodeId:
        x = self._values[a]
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return self._append("softmax_rows", (a,), e / e.sum(axis=1, keepdims=True))

    def l2_norm_rows(self, a: NodeId) -> NodeId:
        value = np.linalg.norm(self._values[a], axis=1, keepdims=True)
        return self._append("l2_norm_rows", (a,), value)

    # --- generic recorder (op names accept dash or underscore spelling) ---

    def record(self, op: str, *inputs, **kwargs) -> NodeId:
        method = getattr(self, op.replace("-", "_"))
        return method(*inputs, **kwargs)

    # --- reverse pass ---

    def backward(self, root: NodeId) -> None:
        """Accumulate adjoints of `root` (a 1x1 scalar) for every node."""
        if self._values[root].shape != (1, 1):
            raise ShapeError(f"backward root must be 1x1, got {self._values[root].shape}")
        adjoints: list = [None] * len(self._ops)
        adjoints[root] = np.ones((1, 1))
        for i in range(root, -1, -1):
            g = adjoints[i]
            if g is None:
                continue
            op = self._ops[i]
            if op in ("constant", "parameter"):
                continue
            for j, contrib in self._numeric_vjp(i, g):
                if adjoints[j] is None:
                    adjoints[j] = contrib.copy()
                else:
                    adjoints[j] += contrib
        self._adjoints = adjoints

    def adjoint(self, node: NodeId) -> Array:
        if not self._adjoints:
            raise RuntimeError("backward has not been run")
        g = self._adjoints[node]
        if g is None:
            return np.zeros_like(self._values[node])
        return g

    def _numeric_vjp(self, i: NodeId, g: Array):
        op = self._ops[i]
        ins = self._inputs[i]
        v = self._values
        if op == "add":
            a, b = ins
            return [(a, _reduce_to(g, v[a].shape)), (b, _reduce_to(g, v[b].shape))]
        if op == "sub":
            a, b = ins
            return [(a, _reduce_to(g, v[a].shape)), (b, _reduce_to(-g, v[b].shape))]
        if op == "mul":
            a, b = ins
            return [
                (a, _reduce_to(g * v[b], v[a].shape)),
                (b, _reduce_to(g * v[a], v[b].shape)),
            ]
        if op == "div":
            a, b = ins
            return [
                (a, _reduce_to(g / v[b], v[a].shape)),
                (b, _reduce_to(-g * v[a] / np.square(v[b]), v[b].shape)),
            ]
        if op == "scale":
            return [(ins[0], g * self._aux[i])]
        if op == "matmul":
            a, b = ins
            return [(a, g @ v[b].T), (b, v[a].T @ g)]
        if op == "transpose":
            return [(ins[0], g.T)]
        if op == "concat_cols":
            a, b = ins
            k = self._aux[i]
            return [(a, g[:, :k]), (b, g[:, k:])]
        if op == "relu":
            a = ins[0]
            return [(a, g * (v[a] > 0.0))]
        if op == "leaky_relu":
            a = ins[0]
            return [(a, g * np.where(v[a] > 0.0, 1.0, LEAKY_SLOPE))]
        if op == "tanh":
            return [(ins[0], g * (1.0 - np.square(v[i])))]
        if op == "square":
            a = ins[0]
            return [(a, g * 2.0 * v[a])]
        if op == "sqrt":
            out = v[i]
            return [(ins[0], g * np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0))]
        if op == "log":
            a = ins[0]
            return [(a, g / v[a])]
        if op == "row_mean":
            a = ins[0]
            n = v[a].shape[0]
            return [(a, np.broadcast_to(g / n, v[a].shape).copy())]
        if op == "sum":
            a = ins[0]
            return [(a, np.full_like(v[a], g[0, 0]))]
        if op == "softmax_rows":
            a = ins[0]
            y = v[i]
            inner = (g * y).sum(axis=1, keepdims=True)
            return [(a, y * (g - inner))]
        if op == "l2_norm_rows":
            a = ins[0]
            norm = v[i]
            safe = np.where(norm > 0.0, norm, 1.0)
            return [(a, np.where(norm > 0.0, g / safe, 0.0) * v[a])]
        raise GradientRuleError(f"no numeric gradient rule for op '{op}'")

    # --- analytic input-gradients as tape expressions ---

    def input_gradient(self, d_output: NodeId, wrt: NodeId) -> NodeId:
        """Gradient of a scalar-per-row output w.r.t. `wrt`, as a new node.

        `d_output` must have shape (n, 1) with one independent scalar per
        row of `wrt` (row-mixing ops on the path are rejected). The result
        node has `wrt`'s shape and stays differentiable with respect to any
        parameters the path touches, so penalties built on it can be pushed
        through `backward`.
        """
        out_shape = self._values[d_output].shape
        wrt_shape = self._values[wrt].shape
        if out_shape[1] != 1 or out_shape[0] != wrt_shape[0]:
            raise ShapeError(
                f"input_gradient needs one output row per input row, "
                f"got output {out_shape} for input {wrt_shape}"
            )

        descendants = {wrt}
        for i in range(wrt + 1, d_output + 1):
            if any(j in descendants for j in self._inputs[i]):
                descendants.add(i)
        if d_output not in descendants:
            return self.constant(np.zeros(wrt_shape))

        relevant = {d_output}
        for i in range(d_output, wrt - 1, -1):
            if i in relevant:
                for j in self._inputs[i]:
                    if j in descendants:
                        relevant.add(j)

        adj: dict[NodeId, NodeId] = {d_output: self.constant(np.ones(out_shape))}
        for i in sorted(relevant, reverse=True):
            if i == wrt:
                continue
            g = adj.get(i)
            if g is None:
                continue
            for j, contrib in self._expression_vjp(i, g):
                if j not in relevant:
                    continue
                adj[j] = contrib if j not in adj else self.add(adj[j], contrib)
        return adj[wrt]

    def _match_shape(self, expr: NodeId, shape: tuple) -> NodeId:
        """Reduce a gradient expression over broadcast axes, as tape ops."""
        got = self._values[expr].shape
        if got == shape:
            return expr
        out = expr
        if shape[0] == 1 and got[0] != 1:
            out = self.scale(self.row_mean(out), got[0])
            got = self._values[out].shape
        if shape[1] == 1 and got[1] != 1:
            out = self.matmul(out, self.constant(np.ones((got[1], 1))))
        return out

    def _expression_vjp(self, i: NodeId, g: NodeId):
        op = self._ops[i]
        ins = self._inputs[i]
        v = self._values
        if op == "add":
            a, b = ins
            return [
                (a, self._match_shape(g, v[a].shape)),
                (b, self._match_shape(g, v[b].shape)),
            ]
        if op == "sub":
            a, b = ins
            return [
                (a, self._match_shape(g, v[a].shape)),
                (b, self._match_shape(self.scale(g, -1.0), v[b].shape)),
            ]
        if op == "mul":
            a, b = ins
            return [
                (a, self._match_shape(self.mul(g, b), v[a].shape)),
                (b, self._match_shape(self.mul(g, a), v[b].shape)),
            ]
        if op == "div":
            a, b = ins
            to_a = self._match_shape(self.div(g, b), v[a].shape)
            to_b = self.scale(self.div(self.mul(g, a), self.square(b)), -1.0)
            return [(a, to_a), (b, self._match_shape(to_b, v[b].shape))]
        if op == "scale":
            return [(ins[0], self.scale(g, self._aux[i]))]
        if op == "matmul":
            a, b = ins
            return [
                (a, self.matmul(g, self.transpose(b))),
                (b, self.matmul(self.transpose(a), g)),
            ]
        if op == "transpose":
            return [(ins[0], self.transpose(g))]
        if op == "concat_cols":
            a, b = ins
            k = self._aux[i]
            ka = v[a].shape[1]
            kb = v[b].shape[1]
            sel_a = np.zeros((k + kb, ka))
            sel_a[:ka, :] = np.eye(ka)
            sel_b = np.zeros((k + kb, kb))
            sel_b[ka:, :] = np.eye(kb)
            return [
                (a, self.matmul(g, self.constant(sel_a))),
                (b, self.matmul(g, self.constant(sel_b))),
            ]
        if op == "relu":
            mask = (v[ins[0]] > 0.0).astype(np.float64)
            return [(ins[0], self.mul(g, self.constant(mask)))]
        if op == "leaky_relu":
            mask = np.where(v[ins[0]] > 0.0, 1.0, LEAKY_SLOPE)
            return [(ins[0], self.mul(g, self.constant(mask)))]
        if op == "tanh":
            ones = self.constant(np.ones_like(v[i]))
            return [(ins[0], self.mul(g, self.sub(ones, self.square(i))))]
        if op == "square":
            return [(ins[0], self.mul(g, self.scale(ins[0], 2.0)))]
        if op == "sqrt":
            return [(ins[0], self.div(self.scale(g, 0.5), i))]
        if op == "log":
            return [(ins[0], self.div(g, ins[0]))]
        raise GradientRuleError(
            f"op '{op}' has no registered input-Jacobian rule; "
            f"analytic input gradients support elementwise and affine subgraphs only"
        )


@dataclass
class AdamState:
    """First/second moment estimates per parameter name, plus the step count."""

    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Array]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    context: str = "",
) -> None:
    """One Adam update, in place. Raises TrainingDiverged on non-finite grads."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            where = f" in {context}" if context else ""
            raise TrainingDiverged(f"non-finite gradient for '{name}'{where}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
