"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is a tape: every operation appends a node holding its
cached activation and a closure mapping the output gradient to input
gradients. ``Graph.backward`` walks the tape in reverse exactly once.

Only the layers the pipeline uses are provided. Shapes must match exactly
except for bias addition; there is no general broadcasting.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

# Tensors are plain float64 ndarrays.
Tensor = np.ndarray


class GraphError(RuntimeError):
    """Misuse of a graph: backward before forward, double backward, ..."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def as_tensor(x) -> Tensor:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        return arr.reshape(())
    return arr


class Parameter:
    """A named trainable array with its gradient buffer."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"


class Node:
    __slots__ = ("id", "kind", "inputs", "value", "backward_fn", "requires_grad", "param")

    def __init__(self, id, kind, inputs, value, backward_fn, requires_grad, param=None):
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.kind}, shape={self.value.shape})"


def _check_finite(kind: str, value: Tensor) -> None:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite activation produced by {kind}")


class Graph:
    """Append-only tape of operations; single-threaded, single backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}
        self._grads: dict[int, Tensor] | None = None
        self._done = False

    # -- construction -------------------------------------------------

    def _add(self, kind, inputs, value, backward_fn=None) -> Node:
        if self._done:
            raise GraphError("graph already differentiated; build a new graph")
        _check_finite(kind, value)
        req = any(n.requires_grad for n in inputs) and backward_fn is not None
        node = Node(len(self.nodes), kind, tuple(inputs), value, backward_fn, req)
        self.nodes.append(node)
        return node

    def input(self, value, requires_grad: bool = False) -> Node:
        value = as_tensor(value)
        node = self._add("input", (), value)
        node.requires_grad = requires_grad
        return node

    def param(self, p: Parameter) -> Node:
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._add("param", (), p.value)
            node.requires_grad = p.trainable
            node.param = p
            self._param_nodes[id(p)] = node
        return node

    def _node(self, x) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, Parameter):
            return self.param(x)
        return self.input(x)

    def custom(self, kind: str, inputs: Sequence, value, backward_fn) -> Node:
        """Register an externally defined operation.

        ``backward_fn(grad_out)`` must return one gradient (or None) per input.
        """
        inputs = [self._node(x) for x in inputs]
        return self._add(kind, inputs, as_tensor(value), backward_fn)

    # -- layers -------------------------------------------------------

    def linear(self, x, weight, bias=None) -> Node:
        x, w = self._node(x), self._node(weight)
        if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
        xv, wv = x.value, w.value
        out = xv @ wv
        inputs = [x, w]
        if bias is not None:
            b = self._node(bias)
            if b.shape != (w.shape[1],):
                raise ShapeError(f"linear: bias {b.shape} vs out dim {w.shape[1]}")
            out = out + b.value
            inputs.append(b)

        def backward(g):
            grads = [g @ wv.T if x.requires_grad else None,
                     xv.T @ g if w.requires_grad else None]
            if len(inputs) == 3:
                grads.append(g.sum(axis=0))
            return grads

        return self._add("linear", inputs, out, backward)

    def conv2d(self, x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Node:
        x, k = self._node(x), self._node(kernel)
        if x.value.ndim != 4 or k.value.ndim != 4 or x.shape[1] != k.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} vs kernel {k.shape}")
        B, C, H, W = x.shape
        K, _, kh, kw = k.shape
        Ho = (H + 2 * pad - kh) // stride + 1
        Wo = (W + 2 * pad - kw) // stride + 1
        if kh > H + 2 * pad or kw > W + 2 * pad or Ho <= 0 or Wo <= 0:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for {H}x{W} (pad {pad})")
        xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.value
        kmat = k.value.reshape(K, C * kh * kw)
        out, cols = _correlate(xp, kmat, kh, kw, stride, Ho, Wo)
        inputs = [x, k]
        if bias is not None:
            b = self._node(bias)
            if b.shape != (K,):
                raise ShapeError(f"conv2d: bias {b.shape} vs {K} output channels")
            out += b.value[None, :, None, None]
            inputs.append(b)

        def backward(g):
            dk = dx = None
            if k.requires_grad:
                gm = g.transpose(1, 0, 2, 3).reshape(K, B * Ho * Wo)
                dk = (gm @ cols.T).reshape(k.shape)
            if x.requires_grad:
                Hp, Wp = H + 2 * pad, W + 2 * pad
                if stride == 1:
                    # full correlation of the output gradient with the
                    # flipped, channel-swapped kernel
                    gd = np.pad(g, ((0, 0), (0, 0), (kh - 1, Hp - Ho), (kw - 1, Wp - Wo)))
                    flip = k.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, K * kh * kw)
                    dxp, _ = _correlate(gd, flip, kh, kw, 1, Hp, Wp)
                else:
                    gm = g.transpose(1, 0, 2, 3).reshape(K, B * Ho * Wo)
                    dcols = (kmat.T @ gm).reshape(C, kh, kw, B, Ho, Wo)
                    acc = np.zeros((C, B, Hp, Wp))
                    for i in range(kh):
                        for j in range(kw):
                            acc[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
                    dxp = acc.transpose(1, 0, 2, 3)
                dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
            grads = [dx, dk]
            if len(inputs) == 3:
                grads.append(g.sum(axis=(0, 2, 3)))
            return grads

        return self._add("conv2d", inputs, out, backward)

    def relu(self, x) -> Node:
        x = self._node(x)
        mask = x.value > 0
        return self._add("relu", [x], np.where(mask, x.value, 0.0), lambda g: [g * mask])

    def sigmoid(self, x) -> Node:
        x = self._node(x)
        out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
        return self._add("sigmoid", [x], out, lambda g: [g * out * (1.0 - out)])

    def mean_pool(self, x) -> Node:
        """Global spatial average: B x C x H x W -> B x C."""
        x = self._node(x)
        if x.value.ndim != 4:
            raise ShapeError(f"mean_pool expects 4-d input, got {x.shape}")
        B, C, H, W = x.shape
        out = x.value.mean(axis=(2, 3))
        return self._add(
            "mean_pool", [x], out,
            lambda g: [np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy()])

    def upsample2x(self, x) -> Node:
        """Nearest-neighbour 2x spatial upsampling."""
        x = self._node(x)
        B, C, H, W = x.shape
        out = x.value.repeat(2, axis=2).repeat(2, axis=3)
        return self._add(
            "upsample2x", [x], out,
            lambda g: [g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))])

    def residual_add(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        if a.shape != b.shape:
            raise ShapeError(f"residual_add: {a.shape} vs {b.shape}")
        return self._add("residual_add", [a, b], a.value + b.value, lambda g: [g, g])

    def flatten(self, x) -> Node:
        x = self._node(x)
        shape = x.shape
        return self._add("flatten", [x], x.value.reshape(shape[0], -1),
                         lambda g: [g.reshape(shape)])

    def mul_const(self, x, c) -> Node:
        """Elementwise product with a constant array of identical shape."""
        x = self._node(x)
        c = as_tensor(c)
        if c.shape != x.shape:
            raise ShapeError(f"mul_const: {x.shape} vs {c.shape}")
        return self._add("mul_const", [x], x.value * c, lambda g: [g * c])

    def sum(self, x) -> Node:
        x = self._node(x)
        shape = x.shape
        return self._add("sum", [x], np.asarray(x.value.sum()),
                         lambda g: [np.full(shape, float(g))])

    def mean(self, x) -> Node:
        x = self._node(x)
        shape, n = x.shape, x.value.size
        return self._add("mean", [x], np.asarray(x.value.mean()),
                         lambda g: [np.full(shape, float(g) / n)])

    def combine(self, terms: Sequence[tuple[Node, float]]) -> Node:
        """Weighted sum of scalar nodes."""
        nodes = [self._node(n) for n, _ in terms]
        coefs = [float(c) for _, c in terms]
        for n in nodes:
            if n.value.size != 1:
                raise ShapeError(f"combine expects scalars, got {n.shape}")
        value = np.asarray(sum(c * float(n.value) for n, c in zip(nodes, coefs)))
        return self._add("combine", nodes, value,
                         lambda g: [np.asarray(float(g) * c).reshape(n.shape)
                                    for n, c in zip(nodes, coefs)])

    def softmax_cross_entropy(self, logits, labels) -> Node:
        """Mean negative log-likelihood of integer labels under softmax(logits)."""
        z = self._node(logits)
        labels = np.asarray(labels, dtype=np.int64)
        B, K = z.shape
        if labels.shape != (B,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
            raise ValueError(f"labels must be {B} integers in [0, {K})")
        probs = softmax(z.value)
        shifted = z.value - z.value.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(B), labels].mean()

        def backward(g):
            d = probs.copy()
            d[np.arange(B), labels] -= 1.0
            return [d * (float(g) / B)]

        return self._add("softmax_cross_entropy", [z], np.asarray(loss), backward)

    # -- differentiation ---------------------------------------------

    def backward(self, loss: Node, accumulate: bool = True) -> None:
        """Propagate d(loss)/d(.) to every node on the tape.

        With ``accumulate`` the gradients of trainable parameters are added
        into ``Parameter.grad``; input-node gradients are available through
        :meth:`grad` either way.
        """
        if self._done:
            raise GraphError("backward already ran on this graph; re-run the forward pass")
        if not self.nodes or loss.id >= len(self.nodes) or self.nodes[loss.id] is not loss:
            raise GraphError("loss node does not belong to this graph (forward not run?)")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._done = True
        grads: dict[int, Tensor] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or not node.requires_grad:
                continue
            if node.backward_fn is None:
                if accumulate and node.param is not None and node.param.trainable:
                    node.param.grad += g
                continue
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
            if node.id != loss.id:
                del grads[node.id]  # interior gradients are not retained
        self._grads = grads

    def grad(self, node: Node) -> Tensor:
        """Gradient of the last backward's loss with respect to a leaf node."""
        if self._grads is None:
            raise GraphError("backward has not run")
        g = self._grads.get(node.id)
        return np.zeros_like(node.value) if g is None else g


def _correlate(xp: Tensor, kmat: Tensor, kh: int, kw: int, stride: int, Ho: int, Wo: int):
    """Valid cross-correlation of a padded batch; returns (B x K x Ho x Wo, im2col matrix)."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * Ho * Wo)
    out = (kmat @ cols).reshape(kmat.shape[0], B, Ho, Wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def softmax(z: Tensor) -> Tensor:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def grad_check(build: Callable[[Graph, Node], Node], point, step: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``build(graph, x)`` must return a scalar node computed from the input
    node ``x`` whose value is ``point``. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=DTYPE)
    g = Graph()
    x = g.input(point, requires_grad=True)
    loss = build(g, x)
    g.backward(loss, accumulate=False)
    analytic = g.grad(x).ravel()

    def f(p):
        gg = Graph()
        return float(build(gg, gg.input(p)).value)

    numeric = np.empty(point.size)
    flat = point.ravel()
    for i in range(point.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(point)
        flat[i] = orig - step
        fm = f(point)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * step)
    if point.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
