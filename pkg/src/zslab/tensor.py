"""Dense float64 tensors with a minimal reverse-mode gradient engine.

The op set covers exactly what the encoder and losses need: broadcast
arithmetic, (batched) matmul, reductions, relu/exp/log/sqrt/tanh, softmax,
layer norm, a pre-norm attention block, and cosine distance. Values are
checked finite on construction; NaN/Inf never enter a graph.
"""

from __future__ import annotations

import math
import numpy as np

from .errors import ConfigError, DegenerateInputError, NumericsError


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError("non-finite value entering a tensor graph")
    return arr


def _reduce_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph: value, op tag, parents, adjoint."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, op: str, backward_fn) -> "Tensor":
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        out._parents = parents
        out._op = op
        if out.requires_grad:
            out._backward = backward_fn
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data + other.data

            def bwd(g):
                if self.requires_grad:
                    self._accum(_reduce_to_shape(g, self.shape))
                if other.requires_grad:
                    other._accum(_reduce_to_shape(g, other.shape))

            return Tensor._from_op(out_data, (self, other), "add", bwd)
        c = float(other)

        def bwd(g):
            self._accum(g)

        return Tensor._from_op(self.data + c, (self,), "add", bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)

        return Tensor._from_op(-self.data, (self,), "neg", bwd)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data * other.data

            def bwd(g):
                if self.requires_grad:
                    self._accum(_reduce_to_shape(g * other.data, self.shape))
                if other.requires_grad:
                    other._accum(_reduce_to_shape(g * self.data, other.shape))

            return Tensor._from_op(out_data, (self, other), "mul", bwd)
        c = float(other)

        def bwd(g):
            self._accum(g * c)

        return Tensor._from_op(self.data * c, (self,), "mul", bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data / other.data

            def bwd(g):
                if self.requires_grad:
                    self._accum(_reduce_to_shape(g / other.data, self.shape))
                if other.requires_grad:
                    other._accum(_reduce_to_shape(-g * self.data / other.data**2, other.shape))

            return Tensor._from_op(out_data, (self, other), "div", bwd)
        return self * (1.0 / float(other))

    def matmul(self, other: "Tensor") -> "Tensor":
        out_data = np.matmul(self.data, other.data)

        def bwd(g):
            if self.requires_grad:
                if other.data.ndim == 1:
                    ga = np.multiply.outer(g, other.data) if g.ndim else g * other.data
                else:
                    ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accum(_reduce_to_shape(ga, self.shape))
            if other.requires_grad:
                if self.data.ndim == 1:
                    gb = np.multiply.outer(self.data, g) if g.ndim else self.data * g
                else:
                    gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accum(_reduce_to_shape(gb, other.shape))

        return Tensor._from_op(out_data, (self, other), "matmul", bwd)

    __matmul__ = matmul

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def bwd(g):
            self._accum(g.reshape(old))

        return Tensor._from_op(self.data.reshape(shape), (self,), "reshape", bwd)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))

        def bwd(g):
            self._accum(g.transpose(inv))

        return Tensor._from_op(self.data.transpose(axes), (self,), "transpose", bwd)

    def swap_last(self) -> "Tensor":
        axes = list(range(self.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        old = self.shape

        def bwd(g):
            self._accum(_reduce_to_shape(g, old))

        return Tensor._from_op(np.broadcast_to(self.data, shape).copy(), (self,), "broadcast", bwd)

    def __getitem__(self, key) -> "Tensor":
        def bwd(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, key, g)
            self._accum(buf)

        return Tensor._from_op(self.data[key], (self,), "getitem", bwd)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        return Tensor._from_op(out_data, (self,), "sum", bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities -------------------------------------------

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)

        def bwd(g):
            self._accum(g * (self.data > 0.0))  # subgradient 0 exactly at the kink

        return Tensor._from_op(out_data, (self,), "relu", bwd)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bwd(g):
            self._accum(g * out_data)

        return Tensor._from_op(out_data, (self,), "exp", bwd)

    def log(self) -> "Tensor":
        def bwd(g):
            self._accum(g / self.data)

        return Tensor._from_op(np.log(self.data), (self,), "log", bwd)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bwd(g):
            self._accum(g * 0.5 / out_data)

        return Tensor._from_op(out_data, (self,), "sqrt", bwd)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def bwd(g):
            self._accum(g * (1.0 - out_data**2))

        return Tensor._from_op(out_data, (self,), "tanh", bwd)


class Param(Tensor):
    """A named leaf. Frozen params keep an all-zero grad through any backward."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.trainable})"


# -- graph traversal ------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate grads of all reachable requires_grad leaves from a scalar root."""
    if loss.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def graph_min_kink_distance(root: Tensor) -> float:
    """Smallest |x| over all relu inputs in the graph; inf if no hinge present."""
    dist = math.inf
    for node in _topo_order(root):
        if node._op == "relu":
            dist = min(dist, float(np.min(np.abs(node._parents[0].data))))
    return dist


# -- composite ops -----------------------------------------------------------------


def dot(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum()


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Stable softmax of x / temperature along an axis."""
    if temperature <= 0.0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accum(y * (g - inner) / temperature)

    return Tensor._from_op(y, (x,), "softmax", bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply the affine (gain, bias)."""
    if eps < 0.0:
        raise ConfigError("layer_norm eps must be nonnegative")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis of {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    xhat = centered / (var + eps).sqrt()
    return xhat * gain + bias


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along `axis` to unit Euclidean norm."""
    sq = (x * x).sum(axis=axis, keepdims=True)
    if np.any(sq.data == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return x / sq.sqrt()


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """1 - cos(a, b). For [d] inputs returns a scalar; for [N, d] inputs, [N] rowwise."""
    if a.shape != b.shape or a.data.ndim not in (1, 2):
        raise ValueError(f"cosine_distance expects matching [d] or [N,d] shapes, got {a.shape} vs {b.shape}")
    na = (a * a).sum(axis=-1)
    nb = (b * b).sum(axis=-1)
    if np.any(na.data == 0.0) or np.any(nb.data == 0.0):
        raise DegenerateInputError("cosine_distance on a zero-norm input")
    return 1.0 - (a * b).sum(axis=-1) / (na.sqrt() * nb.sqrt())


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    c = math.sqrt(2.0 / math.pi)
    inner = (x + 0.044715 * (x * x * x)) * c
    return 0.5 * (x * (1.0 + inner.tanh()))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    parts = [t.data for t in tensors]
    out_data = np.concatenate(parts, axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(tensors), "concat", bwd)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor._from_op(out_data, tuple(tensors), "stack", bwd)


def attention_block(tokens: Tensor, weights: dict, heads: int = 1, eps: float = 1e-5) -> Tensor:
    """Pre-norm transformer block: attention + GELU MLP, both with residuals.

    `weights` maps the fixed key set {ln1_gain, ln1_bias, qw, qb, kw, kb, vw, vb,
    ow, ob, ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2} to Params.
    Accepts [m, d] or batched [B, m, d] tokens; shape-preserving and
    deterministic given the weights.
    """
    squeeze = tokens.data.ndim == 2
    x = tokens.reshape((1,) + tokens.shape) if squeeze else tokens
    bsz, m, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"embed dim {d} not divisible by heads {heads}")
    dh = d // heads

    h = layer_norm(x, weights["ln1_gain"], weights["ln1_bias"], eps)
    q = h @ weights["qw"] + weights["qb"]
    k = h @ weights["kw"] + weights["kb"]
    v = h @ weights["vw"] + weights["vb"]

    def split(t):
        return t.reshape(bsz, m, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(q), split(k), split(v)
    scores = (q @ k.swap_last()) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, m, d)
    x = x + (mixed @ weights["ow"] + weights["ob"])

    h = layer_norm(x, weights["ln2_gain"], weights["ln2_bias"], eps)
    h = gelu(h @ weights["mlp_w1"] + weights["mlp_b1"])
    x = x + (h @ weights["mlp_w2"] + weights["mlp_b2"])
    return x.reshape(m, d) if squeeze else x


# -- finite-difference checking ---------------------------------------------------


class FiniteDiffResult:
    """Outcome of a gradient check; `skipped` marks a hinge-kink point."""

    def __init__(self, max_rel_error: float, skipped: bool = False, kink_distance: float = math.inf):
        self.max_rel_error = max_rel_error
        self.skipped = skipped
        self.kink_distance = kink_distance

    def __repr__(self):
        if self.skipped:
            return f"FiniteDiffResult(skipped, kink_distance={self.kink_distance:.3g})"
        return f"FiniteDiffResult(max_rel_error={self.max_rel_error:.3g})"


def finite_diff_check(loss_fn, params: list[Param], h: float = 1e-5) -> FiniteDiffResult:
    """Compare analytic grads of loss_fn() against central finite differences.

    loss_fn must rebuild the graph from `params` on every call. Points within
    10*h of a hinge kink are skipped and flagged rather than checked.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigError(f"finite-difference step h={h} outside [1e-7, 1e-3]")
    loss = loss_fn()
    kink = graph_min_kink_distance(loss)
    if kink <= 10.0 * h:
        return FiniteDiffResult(math.nan, skipped=True, kink_distance=kink)

    for p in params:
        p.zero_grad()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            a = ana.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    return FiniteDiffResult(worst, kink_distance=kink)
