"""Dense float64 tensors and a reverse-mode differentiation tape.

Tensors are immutable row-major arrays of finite 64-bit floats. A Tape
records every primitive applied to nodes that (transitively) depend on a
leaf, and replaying the records in reverse accumulates exact adjoints for
one scalar output. Shapes never broadcast implicitly; the only broadcast
forms are the explicit per-row / per-column helpers.
"""

import numpy as np

from . import backend as _K
from .errors import NonFiniteError, ShapeError


class Tensor:
    """Immutable C-contiguous float64 array with guaranteed-finite entries."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr is data or arr.base is not None:
            # never freeze or alias memory the caller still owns
            arr = arr.copy()
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite entries in tensor of shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    @staticmethod
    def zeros(shape):
        return Tensor(np.zeros(shape))

    @staticmethod
    def full(shape, value):
        return Tensor(np.full(shape, float(value)))

    @staticmethod
    def eye(n):
        return Tensor(np.eye(n))


def _finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Node:
    """A value on a tape. Do not construct directly; use Tape methods."""

    __slots__ = ("tape", "idx", "value", "needs_grad")

    def __init__(self, tape, idx, value, needs_grad):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Ordered record of primitive operations with saved inputs for adjoints.

    Single-threaded by design; use one tape per sample and merge gradients
    outside. Leaves get gradients from :meth:`backward`; a leaf that never
    influenced the scalar output gets zeros from :meth:`grad`.
    """

    def __init__(self):
        self._n_nodes = 0
        self._records = []  # (out_idx, [input nodes], vjp) for grad-needing ops
        self._grads = None

    # -- node creation -----------------------------------------------------

    def _node(self, value, needs_grad):
        node = Node(self, self._n_nodes, value, needs_grad)
        self._n_nodes += 1
        return node

    def constant(self, tensor):
        """A value gradients never flow into."""
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        return self._node(tensor, False)

    def leaf(self, tensor):
        """A differentiable input (parameter)."""
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        return self._node(tensor, True)

    def _apply(self, name, out_arr, inputs, vjp):
        needs = any(n.needs_grad for n in inputs)
        out = self._node(Tensor(_finite(out_arr, name)), needs)
        if needs:
            self._records.append((out.idx, inputs, vjp))
        return out

    # -- primitives --------------------------------------------------------

    def matmul(self, a, b):
        av, bv = a.value.data, b.value.data
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {av.shape} x {bv.shape}")

        def vjp(g):
            return (_K.matmul_nt(g, bv), _K.matmul_tn(av, g))

        return self._apply("matmul", _K.matmul(av, bv), [a, b], vjp)

    def matmul_nt(self, a, b):
        """a @ b.T for 2-D operands."""
        av, bv = a.value.data, b.value.data
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
            raise ShapeError(f"matmul_nt: incompatible shapes {av.shape} x {bv.shape}")

        def vjp(g):
            return (_K.matmul(g, bv), _K.matmul_tn(g, av))

        return self._apply("matmul_nt", _K.matmul_nt(av, bv), [a, b], vjp)

    def matmul_tn(self, a, b):
        """a.T @ b for 2-D operands."""
        av, bv = a.value.data, b.value.data
        if av.ndim != 2 or bv.ndim != 2 or av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul_tn: incompatible shapes {av.shape} x {bv.shape}")

        def vjp(g):
            return (_K.matmul_nt(bv, g), _K.matmul(av, g))

        return self._apply("matmul_tn", _K.matmul_tn(av, bv), [a, b], vjp)

    def matvec(self, a, v):
        av, vv = a.value.data, v.value.data
        if av.ndim != 2 or vv.ndim != 1 or av.shape[1] != vv.shape[0]:
            raise ShapeError(f"matvec: incompatible shapes {av.shape} x {vv.shape}")

        def vjp(g):
            return (np.outer(g, vv), np.dot(av.T, g))

        return self._apply("matvec", np.dot(av, vv), [a, v], vjp)

    def vecmat(self, v, a):
        """v.T @ a for a vector and a matrix."""
        vv, av = v.value.data, a.value.data
        if vv.ndim != 1 or av.ndim != 2 or vv.shape[0] != av.shape[0]:
            raise ShapeError(f"vecmat: incompatible shapes {vv.shape} x {av.shape}")

        def vjp(g):
            return (np.dot(av, g), np.outer(vv, g))

        return self._apply("vecmat", np.dot(vv, av), [v, a], vjp)

    def dot(self, u, v):
        uv, vv = u.value.data, v.value.data
        if uv.shape != vv.shape or uv.ndim != 1:
            raise ShapeError(f"dot: incompatible shapes {uv.shape} x {vv.shape}")

        def vjp(g):
            return (g * vv, g * uv)

        return self._apply("dot", np.dot(uv, vv), [u, v], vjp)

    def _same_shape(self, name, x, y):
        if x.value.shape != y.value.shape:
            raise ShapeError(f"{name}: shape mismatch {x.value.shape} vs {y.value.shape}")

    def add(self, x, y):
        self._same_shape("add", x, y)
        return self._apply("add", x.value.data + y.value.data, [x, y], lambda g: (g, g))

    def sub(self, x, y):
        self._same_shape("sub", x, y)
        return self._apply("sub", x.value.data - y.value.data, [x, y], lambda g: (g, -g))

    def mul(self, x, y):
        self._same_shape("mul", x, y)
        xv, yv = x.value.data, y.value.data
        return self._apply("mul", xv * yv, [x, y], lambda g: (g * yv, g * xv))

    def smul(self, x, c):
        """Scale by a plain Python float (not differentiated w.r.t. c)."""
        c = float(c)
        return self._apply("smul", x.value.data * c, [x], lambda g: (g * c,))

    def scalarmul(self, s, x):
        """Scalar node times tensor node."""
        sv, xv = s.value.data, x.value.data
        if sv.ndim != 0:
            raise ShapeError(f"scalarmul: first operand must be scalar, got {sv.shape}")

        def vjp(g):
            return (np.sum(g * xv), g * float(sv))

        return self._apply("scalarmul", float(sv) * xv, [s, x], vjp)

    def add_rowvec(self, x, b):
        """Add a length-n vector to every row of an m-by-n matrix."""
        xv, bv = x.value.data, b.value.data
        if xv.ndim != 2 or bv.ndim != 1 or xv.shape[1] != bv.shape[0]:
            raise ShapeError(f"add_rowvec: incompatible shapes {xv.shape} + {bv.shape}")
        return self._apply("add_rowvec", xv + bv[None, :], [x, b],
                           lambda g: (g, g.sum(axis=0)))

    def add_colvec(self, x, c):
        """Add a length-m vector to every column of an m-by-n matrix."""
        xv, cv = x.value.data, c.value.data
        if xv.ndim != 2 or cv.ndim != 1 or xv.shape[0] != cv.shape[0]:
            raise ShapeError(f"add_colvec: incompatible shapes {xv.shape} + {cv.shape}")
        return self._apply("add_colvec", xv + cv[:, None], [x, c],
                           lambda g: (g, g.sum(axis=1)))

    def exp(self, x):
        with np.errstate(over="ignore"):  # overflow becomes NonFiniteError below
            out = np.exp(x.value.data)
        return self._apply("exp", out, [x], lambda g: (g * out,))

    def log(self, x):
        xv = x.value.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(xv)
        return self._apply("log", out, [x], lambda g: (g / xv,))

    def relu(self, x):
        xv = x.value.data
        return self._apply("relu", np.maximum(xv, 0.0), [x],
                           lambda g: (g * (xv > 0.0),))

    def sigmoid(self, x):
        out = 1.0 / (1.0 + np.exp(-x.value.data))
        return self._apply("sigmoid", out, [x], lambda g: (g * out * (1.0 - out),))

    def softmax_rows(self, x):
        xv = x.value.data
        if xv.ndim != 2:
            raise ShapeError(f"softmax_rows: need a matrix, got shape {xv.shape}")
        out = _K.softmax_rows(xv)

        def vjp(g):
            return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

        return self._apply("softmax_rows", out, [x], vjp)

    def softmax_vec(self, x):
        xv = x.value.data
        if xv.ndim != 1:
            raise ShapeError(f"softmax_vec: need a vector, got shape {xv.shape}")
        out = _K.softmax_rows(xv[None, :])[0]

        def vjp(g):
            return (out * (g - np.dot(g, out)),)

        return self._apply("softmax_vec", out, [x], vjp)

    def logsumexp_rows(self, x):
        xv = x.value.data
        if xv.ndim != 2:
            raise ShapeError(f"logsumexp_rows: need a matrix, got shape {xv.shape}")
        out = _K.logsumexp_rows(xv)

        def vjp(g):
            return (np.exp(xv - out[:, None]) * g[:, None],)

        return self._apply("logsumexp_rows", out, [x], vjp)

    def logsumexp_cols(self, x):
        xv = x.value.data
        if xv.ndim != 2:
            raise ShapeError(f"logsumexp_cols: need a matrix, got shape {xv.shape}")
        out = _K.logsumexp_cols(xv)

        def vjp(g):
            return (np.exp(xv - out[None, :]) * g[None, :],)

        return self._apply("logsumexp_cols", out, [x], vjp)

    def sum(self, x):
        xv = x.value.data
        return self._apply("sum", np.asarray(xv.sum()), [x],
                           lambda g: (np.full_like(xv, float(g)),))

    def take(self, v, i):
        vv = v.value.data
        if vv.ndim != 1:
            raise ShapeError(f"take: need a vector, got shape {vv.shape}")
        i = int(i)
        if not 0 <= i < vv.shape[0]:
            raise ShapeError(f"take: index {i} out of range for length {vv.shape[0]}")

        def vjp(g):
            out = np.zeros_like(vv)
            out[i] = float(g)
            return (out,)

        return self._apply("take", np.asarray(vv[i]), [v], vjp)

    def take_row(self, x, i):
        xv = x.value.data
        if xv.ndim != 2:
            raise ShapeError(f"take_row: need a matrix, got shape {xv.shape}")
        i = int(i)
        if not 0 <= i < xv.shape[0]:
            raise ShapeError(f"take_row: row {i} out of range for {xv.shape[0]} rows")

        def vjp(g):
            out = np.zeros_like(xv)
            out[i, :] = g
            return (out,)

        return self._apply("take_row", xv[i].copy(), [x], vjp)

    def vstack(self, a, b):
        av, bv = a.value.data, b.value.data
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
            raise ShapeError(f"vstack: incompatible shapes {av.shape} / {bv.shape}")
        na = av.shape[0]

        def vjp(g):
            return (g[:na], g[na:])

        return self._apply("vstack", np.vstack([av, bv]), [a, b], vjp)

    def concat(self, parts):
        parts = list(parts)
        if not parts or any(p.value.ndim != 1 for p in parts):
            raise ShapeError("concat: need one or more vectors")
        sizes = [p.value.shape[0] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(g[offsets[k]:offsets[k + 1]] for k in range(len(parts)))

        return self._apply("concat", np.concatenate([p.value.data for p in parts]),
                           parts, vjp)

    def reshape(self, x, shape):
        xv = x.value.data
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != xv.size:
            raise ShapeError(f"reshape: cannot view {xv.shape} as {shape}")
        old = xv.shape

        def vjp(g):
            return (g.reshape(old),)

        return self._apply("reshape", xv.reshape(shape).copy(), [x], vjp)

    # -- backward ----------------------------------------------------------

    def backward(self, out):
        """Accumulate adjoints of a scalar node into every leaf that fed it."""
        if out.tape is not self:
            raise ShapeError("backward: node belongs to a different tape")
        if out.value.ndim != 0:
            raise ShapeError(f"backward: output must be scalar, got shape {out.value.shape}")
        grads = {out.idx: np.asarray(1.0)}
        for out_idx, inputs, vjp in reversed(self._records):
            g = grads.get(out_idx)
            if g is None:
                continue
            contribs = vjp(g)
            for node, contrib in zip(inputs, contribs):
                if not node.needs_grad:
                    continue
                prev = grads.get(node.idx)
                grads[node.idx] = contrib if prev is None else prev + contrib
        self._grads = grads

    def grad(self, node):
        """Gradient for a node after backward(); zeros if it never influenced the output."""
        if self._grads is None:
            raise RuntimeError("grad() before backward()")
        g = self._grads.get(node.idx)
        if g is None:
            return Tensor.zeros(node.value.shape)
        return Tensor(np.asarray(g, dtype=np.float64).reshape(node.value.shape))


def grad_check(f, theta, step=1e-4):
    """Max relative error between the tape gradient of f and central differences.

    ``f(tape, node) -> scalar node`` must be deterministic. The denominator
    is max(1, |g|), so near-zero gradients are compared absolutely.
    """
    if step <= 0:
        raise ShapeError("grad_check: step must be positive")
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    tape = Tape()
    p = tape.leaf(theta)
    out = f(tape, p)
    tape.backward(out)
    g = tape.grad(p).data

    def value_at(arr):
        t = Tape()
        return float(f(t, t.leaf(Tensor(arr))).value.data)

    base = theta.data
    fd = np.zeros_like(base)
    flat = base.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = value_at((flat + bump).reshape(base.shape))
        lo = value_at((flat - bump).reshape(base.shape))
        fd.ravel()[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
    if g.size == 0:
        return 0.0
    return float(np.max(np.abs(g - fd) / denom))
