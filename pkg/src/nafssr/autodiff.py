"""Rank-4 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every primitive that touches a grad-requiring
input returns a Tensor4 whose Node saves exactly the values its adjoint
needs.  backward() walks the reachable subgraph once in reverse
topological order, accumulates additively into zero-initialized buffers
(so fan-out sums correctly), writes .grad on the leaves, and marks the
tape consumed.  Scalar reductions accumulate in float64 regardless of the
tensor dtype so they can serve as finite-difference scalarizers.
"""

import numpy as np

from .errors import GraphError, NumericsError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph recording (eval / oracle runs)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """One recorded primitive: parent tensors plus the adjoint callback."""

    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor4:
    """Value-semantics (n, c, h, w) tensor; row-major contiguous data."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, node=None):
        data = np.ascontiguousarray(data)
        if data.ndim != 4:
            raise ShapeError(f"Tensor4 needs rank-4 data, got shape {data.shape}")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        # a tensor that does not require grad never links into a graph
        self.node = node if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor4(self.data)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append(f"op={self.node.op}")
        tail = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor4(shape={self.shape}, dtype={self.dtype}{tail})"


def from_op(op, out_data, parents, backward_fn):
    """Wrap an op result, recording a node when grads are live.

    backward_fn(gy) must return one gradient array (or None) per parent,
    in parent order.  Layer modules register their primitives through this
    same hook so the whole network shares one tape discipline.
    """
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor4(out_data, requires_grad=True,
                       node=Node(op, tuple(parents), backward_fn))
    return Tensor4(out_data)


def _check_elementwise_shapes(op, a, b):
    if a.shape == b.shape:
        return False
    n, c, h, w = a.shape
    if b.shape == (1, c, 1, 1):
        return True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal "
                     f"nor per-channel broadcastable (1,c,1,1)")


def add(a, b):
    broadcast = _check_elementwise_shapes("add", a, b)

    def backward_fn(gy):
        gb = gy.sum(axis=(0, 2, 3), keepdims=True) if broadcast else gy
        return gy, gb

    return from_op("add", a.data + b.data, (a, b), backward_fn)


def mul(a, b):
    broadcast = _check_elementwise_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def backward_fn(gy):
        ga = gy * bd
        gb = gy * ad
        if broadcast:
            gb = gb.sum(axis=(0, 2, 3), keepdims=True)
        return ga, gb

    return from_op("mul", ad * bd, (a, b), backward_fn)


def scale(a, s):
    s = float(s)

    def backward_fn(gy):
        return (gy * s,)

    return from_op("scale", a.data * s, (a,), backward_fn)


def sum_all(a):
    """Sum of all elements as a (1,1,1,1) float64 tensor."""
    out = np.array(a.data.sum(dtype=np.float64)).reshape(1, 1, 1, 1)
    shape, dtype = a.shape, a.dtype

    def backward_fn(gy):
        return (np.full(shape, float(gy.reshape(())), dtype=dtype),)

    return from_op("sum_all", out, (a,), backward_fn)


def mean_abs_diff(a, b):
    """Mean |a - b| as a (1,1,1,1) float64 tensor; subgradient 0 at kinks."""
    if a.shape != b.shape:
        raise ShapeError(f"mean_abs_diff: shapes {a.shape} and {b.shape} differ")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    out = np.array(np.abs(diff).mean()).reshape(1, 1, 1, 1)
    sign = np.sign(diff)
    size = diff.size
    dtype = a.dtype

    def backward_fn(gy):
        g = (sign * (float(gy.reshape(())) / size)).astype(dtype)
        return g, -g

    return from_op("mean_abs_diff", out, (a, b), backward_fn)


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != [0, 1, 2, 3]:
        raise ShapeError(f"permute: {axes} is not a permutation of (0,1,2,3)")
    inv = tuple(np.argsort(axes))

    def backward_fn(gy):
        return (np.ascontiguousarray(gy.transpose(inv)),)

    return from_op("permute", np.ascontiguousarray(a.data.transpose(axes)),
                   (a,), backward_fn)


def softmax_lastdim(a):
    """Row softmax along the last axis, max-subtracted for stability."""
    x = a.data
    if not np.isfinite(x).all():
        raise NumericsError("softmax_lastdim: non-finite input")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(gy):
        dot = (gy * y).sum(axis=-1, keepdims=True)
        return (y * (gy - dot),)

    return from_op("softmax_lastdim", y, (a,), backward_fn)


def batched_row_matmul(a, b):
    """(n,h,w1,k) @ (n,h,k,w2) -> (n,h,w1,w2), independent per (n,h) slice."""
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"batched_row_matmul: shapes {a.shape} and {b.shape} "
                         f"do not chain")
    ad, bd = a.data, b.data

    def backward_fn(gy):
        ga = np.matmul(gy, bd.transpose(0, 1, 3, 2))
        gb = np.matmul(ad.transpose(0, 1, 3, 2), gy)
        return ga, gb

    return from_op("batched_row_matmul", np.matmul(ad, bd), (a, b), backward_fn)


def backward(loss):
    """Reverse sweep from a scalar loss; sets .grad on reachable leaves.

    The reachable subgraph is the tape; it is consumed by this call and a
    second backward through any part of it raises GraphError.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise GraphError(f"backward needs a (1,1,1,1) scalar, got {loss.shape}")
    if loss.node is None:
        raise GraphError("backward target carries no graph "
                         "(built under no_grad or from non-grad inputs)")

    # iterative post-order over tensors that carry nodes
    order = []
    state = {}  # id(tensor) -> 0 in-progress, 1 done
    stack = [loss]
    while stack:
        t = stack[-1]
        ti = id(t)
        if state.get(ti) == 1:
            stack.pop()
            continue
        if t.node is not None and t.node.consumed:
            raise GraphError(f"tape through op {t.node.op!r} already consumed "
                             "by a previous backward")
        if state.get(ti) is None:
            state[ti] = 0
            if t.node is not None:
                for p in t.node.parents:
                    if p.node is not None and state.get(id(p)) != 1:
                        stack.append(p)
        else:
            state[ti] = 1
            stack.pop()
            order.append(t)

    grads = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    alive = {id(loss): loss}  # keep tensors alive while id() keys are in use
    leaves = {}
    for t in reversed(order):
        node = t.node
        gy = grads.pop(id(t), None)
        alive.pop(id(t), None)
        if gy is not None:
            pgrads = node.backward_fn(gy)
            for p, g in zip(node.parents, pgrads):
                if g is None or not p.requires_grad:
                    continue
                pi = id(p)
                if pi in grads:
                    grads[pi] = grads[pi] + g
                else:
                    grads[pi] = g
                    alive[pi] = p
                if p.node is None:
                    leaves[pi] = p
        node.consumed = True
        node.parents = ()
        node.backward_fn = None
    # leaves start from zero on every backward: assign, never carry over
    for pi, p in leaves.items():
        p.grad = grads[pi]


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def finite_diff_grad(f, x, eps=1e-3):
    """Central-difference gradient of scalar f at x, element by element.

    Perturbs x.data in place (restoring it), evaluates f(x) graph-free,
    and divides by the step actually realized in x's dtype so float32
    snapping does not bias the quotient.  Returns float64.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_grad: eps must be positive, got {eps}")
    flat = x.data.reshape(-1)
    g = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = np.float64(orig) + eps
            hi_x = float(flat[i])
            hi = float(f(x).data.reshape(()))
            flat[i] = np.float64(orig) - eps
            lo_x = float(flat[i])
            lo = float(f(x).data.reshape(()))
            flat[i] = orig
            g[i] = (hi - lo) / (hi_x - lo_x)
    return g.reshape(x.shape)
