"""Differentiable-numerics kernel: tape-based reverse accumulation over a
fixed op set, single-hidden-layer tanh networks with closed-form input
derivatives, and the Adam optimizer.

All arithmetic is 64-bit. Ops accept plain arrays (eager numpy, nothing
recorded) or ``Node`` objects bound to a ``Tape``; mixing is allowed, plain
inputs are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "Mlp1h",
    "AdamState",
    "mlp_forward",
    "mlp_input_grad",
    "mlp_input_hessian",
    "adam_step",
    "tape_backprop",
    "softplus",
]


class ContractViolation(ValueError):
    """An operation was called outside its contract."""


class Tape:
    """Ordered record of primitive ops; single-threaded, never shared."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str) -> "Node":
        v = np.asarray(value, dtype=np.float64)
        node = Node(self, v, parents=(), fwd=None, name=name)
        return node

    def constant(self, value) -> "Node":
        return self.leaf(value, name="const")

    def _record(self, value, parents, fwd, name) -> "Node":
        return Node(self, np.asarray(value, dtype=np.float64), parents, fwd, name)

    def replay(self) -> None:
        """Re-execute every recorded op in order, refreshing node values.

        Bit-identical to the original forward pass (same ops, same order).
        """
        for node in self.nodes:
            if node.fwd is not None:
                node.value = np.asarray(node.fwd(), dtype=np.float64)


class Node:
    __slots__ = ("tape", "value", "parents", "fwd", "name", "index")

    def __init__(self, tape, value, parents, fwd, name):
        self.tape = tape
        self.value = value
        # parents: tuple of (parent Node, vjp callable adjoint -> grad)
        self.parents = tuple(parents)
        self.fwd = fwd
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Node({self.name}, shape={self.value.shape}, idx={self.index})"


def value_of(x):
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _find_tape(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _find_tape(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(g, s)))
    return tape._record(out, parents, lambda: value_of(a) + value_of(b), "add")


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _find_tape(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, s=bv.shape: _unbroadcast(-g, s)))
    return tape._record(out, parents, lambda: value_of(a) - value_of(b), "sub")


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _find_tape(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, o=bv, s=av.shape: _unbroadcast(g * o, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, o=av, s=bv.shape: _unbroadcast(g * o, s)))
    return tape._record(out, parents, lambda: value_of(a) * value_of(b), "mul")


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    tape = _find_tape(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, o=bv, s=av.shape: _unbroadcast(g / o, s)))
    if isinstance(b, Node):
        parents.append(
            (b, lambda g, n=av, o=bv, s=bv.shape: _unbroadcast(-g * n / (o * o), s))
        )
    return tape._record(out, parents, lambda: value_of(a) / value_of(b), "div")


def _unary(x, f, dfdx_from_out, name):
    xv = value_of(x)
    out = f(xv)
    if not isinstance(x, Node):
        return out
    return x.tape._record(
        out,
        [(x, lambda g, o=out, v=xv: g * dfdx_from_out(o, v))],
        lambda: f(value_of(x)),
        name,
    )


def tanh(x):
    return _unary(x, np.tanh, lambda o, v: 1.0 - o * o, "tanh")


def _softplus_val(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softplus(x):
    """Overflow-free softplus: log1p(exp(-|x|)) + max(x, 0)."""
    return _unary(x, _softplus_val, lambda o, v: _sigmoid(v), "softplus")


def exp(x):
    return _unary(x, np.exp, lambda o, v: o, "exp")


def sin(x):
    return _unary(x, np.sin, lambda o, v: np.cos(v), "sin")


def cos(x):
    return _unary(x, np.cos, lambda o, v: -np.sin(v), "cos")


def square(x):
    return _unary(x, np.square, lambda o, v: 2.0 * v, "square")


def max0(x):
    """Elementwise max(x, 0); subgradient at 0 taken as 0."""
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda o, v: (v > 0).astype(np.float64), "max0")


def asum(x, axis=None):
    xv = value_of(x)
    out = np.sum(xv, axis=axis)
    if not isinstance(x, Node):
        return out

    def vjp(g, shape=xv.shape, axis=axis):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).copy()

    return x.tape._record(out, [(x, vjp)], lambda: np.sum(value_of(x), axis=axis), "sum")


def amean(x, axis=None):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(asum(x, axis=axis), 1.0 / n)


def scale(x, c):
    """Multiplication by a non-differentiated scalar constant."""
    return mul(x, float(c))


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not isinstance(x, Node):
        return out
    return x.tape._record(
        out,
        [(x, lambda g, s=xv.shape: g.reshape(s))],
        lambda: value_of(x).reshape(shape),
        "reshape",
    )


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _find_tape(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, p in enumerate(parts):
        if isinstance(p, Node):
            def vjp(g, a=axis, lo=offsets[i], hi=offsets[i + 1]):
                sl = [slice(None)] * g.ndim
                sl[a] = slice(lo, hi)
                return g[tuple(sl)]

            parents.append((p, vjp))
    return tape._record(
        out, parents, lambda: np.concatenate([value_of(p) for p in parts], axis=axis), "concat"
    )


def slice_axis(x, axis, start, stop):
    xv = value_of(x)
    sl = [slice(None)] * xv.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = xv[sl]
    if not isinstance(x, Node):
        return out

    def vjp(g, shape=xv.shape, sl=sl):
        full = np.zeros(shape)
        full[sl] = g
        return full

    return x.tape._record(out, [(x, vjp)], lambda: value_of(x)[sl], "slice")


def matmul(a, b):
    """2-D matrix product (use einsum for batched contractions)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    out = av @ bv
    tape = _find_tape(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, o=bv: g @ o.T))
    if isinstance(b, Node):
        parents.append((b, lambda g, o=av: o.T @ g))
    return tape._record(out, parents, lambda: value_of(a) @ value_of(b), "matmul")


def einsum(subscripts, *operands):
    """einsum with a generic product-rule VJP.

    Every index of each operand must also appear in the output or in another
    operand (pure contractions; no implicit reductions of private indices).
    """
    in_part, out_spec = subscripts.split("->")
    in_specs = in_part.split(",")
    if len(in_specs) != len(operands):
        raise ContractViolation("einsum operand count mismatch")
    vals = [value_of(op) for op in operands]
    out = np.einsum(subscripts, *vals, optimize=True)
    tape = _find_tape(*operands)
    if tape is None:
        return out
    parents = []
    for i, op in enumerate(operands):
        if not isinstance(op, Node):
            continue
        other_specs = [out_spec] + [s for j, s in enumerate(in_specs) if j != i]
        covered = set("".join(other_specs))
        if not set(in_specs[i]) <= covered:
            raise ContractViolation(
                f"einsum '{subscripts}': operand {i} has private summed indices"
            )
        grad_spec = ",".join(other_specs) + "->" + in_specs[i]
        others = [v for j, v in enumerate(vals) if j != i]

        def vjp(g, gs=grad_spec, others=tuple(others)):
            return np.einsum(gs, g, *others, optimize=True)

        parents.append((op, vjp))
    return tape._record(
        out,
        parents,
        lambda: np.einsum(subscripts, *[value_of(op) for op in operands], optimize=True),
        "einsum",
    )


def fill_strict_lower(v, n):
    """Scatter (..., n(n-1)/2) entries into a strictly-lower-triangular
    (..., n, n) matrix, row-major below the diagonal."""
    rows, cols = np.tril_indices(n, k=-1)
    vv = value_of(v)
    if vv.shape[-1] != len(rows):
        raise ContractViolation("fill_strict_lower: wrong entry count")

    def f(val):
        out = np.zeros(val.shape[:-1] + (n, n))
        out[..., rows, cols] = val
        return out

    out = f(vv)
    if not isinstance(v, Node):
        return out
    return v.tape._record(
        out,
        [(v, lambda g: g[..., rows, cols])],
        lambda: f(value_of(v)),
        "fill_strict_lower",
    )


def diag_embed(v):
    """(..., n) -> (..., n, n) diagonal matrix."""
    vv = value_of(v)
    n = vv.shape[-1]
    idx = np.arange(n)

    def f(val):
        out = np.zeros(val.shape[:-1] + (n, n))
        out[..., idx, idx] = val
        return out

    out = f(vv)
    if not isinstance(v, Node):
        return out
    return v.tape._record(
        out, [(v, lambda g: g[..., idx, idx])], lambda: f(value_of(v)), "diag_embed"
    )


# ---------------------------------------------------------------------------
# reverse accumulation
# ---------------------------------------------------------------------------


def tape_backprop(tape: Tape, loss_node: Node) -> dict[str, np.ndarray]:
    """Reverse accumulation from a scalar loss; returns {leaf name: gradient}.

    Every leaf reachable from the loss receives exactly one accumulated
    adjoint; unreachable named leaves get zeros.
    """
    if loss_node.value.shape != ():
        raise ContractViolation("tape_backprop: loss must be scalar")
    adjoints: dict[int, np.ndarray] = {loss_node.index: np.asarray(1.0)}
    for node in reversed(tape.nodes[: loss_node.index + 1]):
        g = adjoints.get(node.index)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = adjoints.get(parent.index)
            if prev is None:
                adjoints[parent.index] = np.asarray(contrib, dtype=np.float64)
            else:
                adjoints[parent.index] = prev + contrib
    grads: dict[str, np.ndarray] = {}
    for node in tape.nodes:
        if node.fwd is None and node.name != "const":
            g = adjoints.get(node.index)
            grads[node.name] = np.zeros_like(node.value) if g is None else np.broadcast_to(g, node.value.shape).astype(np.float64)
    return grads


# ---------------------------------------------------------------------------
# single-hidden-layer tanh network
# ---------------------------------------------------------------------------


@dataclass
class Mlp1h:
    """y = W2 . tanh(W1 . u + b1) + b2 (fields may be Nodes during training)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ContractViolation("only tanh activation is supported")
        if isinstance(self.W1, np.ndarray):
            h, din = self.W1.shape
            dout = self.W2.shape[0]
            if h < 1 or din < 1 or dout < 1:
                raise ContractViolation("Mlp1h: dimensions must be >= 1")
            if self.b1.shape != (h,) or self.W2.shape != (dout, h) or self.b2.shape != (dout,):
                raise ContractViolation("Mlp1h: shape mismatch")
            for a in (self.W1, self.b1, self.W2, self.b2):
                if not np.all(np.isfinite(a)):
                    raise ContractViolation("Mlp1h: non-finite entries")

    @property
    def din(self):
        return value_of(self.W1).shape[1]

    @property
    def dout(self):
        return value_of(self.W2).shape[0]

    @property
    def hidden(self):
        return value_of(self.W1).shape[0]

    @staticmethod
    def init(din, hidden, dout, rng, w_scale=None):
        if w_scale is None:
            w_scale = 1.0 / np.sqrt(max(din, 1))
        return Mlp1h(
            W1=rng.standard_normal((hidden, din)) * w_scale,
            b1=np.zeros(hidden),
            W2=rng.standard_normal((dout, hidden)) * (1.0 / np.sqrt(hidden)),
            b2=np.zeros(dout),
        )


def _hidden_act(net, u):
    # u: (..., din) -> tanh(u W1^T + b1): (..., h)
    return tanh(add(einsum("...i,hi->...h", u, net.W1), net.b1))


def mlp_forward(net: Mlp1h, u):
    """W2 . tanh(W1 u + b1) + b2 for u of shape (..., din)."""
    if value_of(u).shape[-1] != net.din:
        raise ContractViolation(
            f"mlp_forward: input dim {value_of(u).shape[-1]} != din {net.din}"
        )
    h = _hidden_act(net, u)
    return add(einsum("...h,oh->...o", h, net.W2), net.b2)


def _require_scalar_out(net):
    if net.dout != 1:
        raise ContractViolation("closed-form input derivatives require dout = 1")


def mlp_input_grad(net: Mlp1h, u):
    """Input gradient W1^T (w2 * (1 - h^2)) for a scalar-output net.

    u: (..., din) -> (..., din). Built from primitive ops, so parameter
    gradients of anything downstream come from ordinary reverse accumulation.
    """
    _require_scalar_out(net)
    h = _hidden_act(net, u)
    w2 = reshape(net.W2, (net.hidden,))
    coeff = mul(w2, sub(1.0, square(h)))  # (..., h)
    return einsum("...h,hi->...i", coeff, net.W1)


def mlp_input_hessian(net: Mlp1h, u):
    """Input Hessian W1^T diag(w2 * (-2 h (1-h^2))) W1; exactly symmetric.

    u: (..., din) -> (..., din, din).
    """
    _require_scalar_out(net)
    h = _hidden_act(net, u)
    w2 = reshape(net.W2, (net.hidden,))
    coeff = mul(w2, mul(-2.0, mul(h, sub(1.0, square(h)))))  # (..., h)
    # outer products first: each P[h,i,j] = W1[h,i]*W1[h,j] is symmetric to
    # the last bit, and the h-contraction preserves that exactly.
    outer = einsum("hi,hj->hij", net.W1, net.W1)
    return einsum("...h,hij->...ij", coeff, outer)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict):
    """One Adam update with bias correction, in place. Returns (params, state)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for key, p in params.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter block '{key}'")
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p)
            state.m[key] = m
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
