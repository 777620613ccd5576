"""Dense N-d tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 or float64) together with an
optional gradient buffer.  Every differentiable operation records a node on
a dynamic tape: the result tensor keeps references to its parents and a
closure that applies the chain rule.  ``Tensor.backward`` walks the tape
once in reverse topological order, accumulates gradients (fan-out adds),
and then frees the tape.

Broadcasting is deliberately restricted: binary operations accept equal
shapes or a scalar operand, and any remaining broadcast must be spelled out
with :meth:`Tensor.expand`.  This keeps shape bugs loud instead of silent.

Tensors are treated as immutable after construction except for gradient
accumulation, so forward evaluation of disjoint graphs is safe to run
concurrently; a single backward pass needs exclusive access to its tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# tanh-approximation constants for gelu
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """Dense array with optional gradient tracking.

    ``data`` is always a row-major float32/float64 numpy array.  ``grad``
    is lazily allocated with the same shape during backward.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != np.dtype(dtype):
            arr = arr.astype(dtype)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat it as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # constructors

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float64, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def full(shape, value, dtype=np.float64, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)

    # ------------------------------------------------------------------
    # tape plumbing

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...]) -> "Tensor":
        """Create an op result; caller attaches the backward closure if needed."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._backward_fn = None
        out._parents = tuple(parents) if out.requires_grad else ()
        return out

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar-shaped root.

        Populates ``grad`` on every reachable gradient-tracking tensor;
        gradients accumulate across multiple uses of the same tensor.  The
        tape (parent links and closures) is freed afterwards.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar-shaped root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward called on a tensor that does not track gradients")

        # iterative post-order DFS (graphs can be deep)
        order: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, list[Tensor], int]] = [(self, list(self._parents), 0)]
        while stack:
            node, parents, i = stack[-1]
            if i < len(parents):
                stack[-1] = (node, parents, i + 1)
                p = parents[i]
                if id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, list(p._parents), 0))
            else:
                order.append(node)
                stack.pop()

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn()
            node._backward_fn = None
            node._parents = ()

    # ------------------------------------------------------------------
    # elementwise arithmetic (equal shapes or scalar operand)

    def _binary_operands(self, other, opname):
        """Classify the right operand: same-shape tensor, size-1 tensor, or number."""
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise TypeError(
                    f"{opname}: dtype mismatch {self.data.dtype.name} vs {other.data.dtype.name}"
                )
            if other.size == 1 or other.shape == self.shape:
                return other
            raise ValueError(
                f"{opname}: shapes {self.shape} and {other.shape} differ (only equal shapes "
                f"or a scalar operand are allowed; use expand for broadcasts)"
            )
        if isinstance(other, (int, float, np.floating, np.integer)):
            return float(other)
        raise TypeError(f"{opname}: unsupported operand type {type(other).__name__}")

    @staticmethod
    def _reduce_to(g: np.ndarray, t: "Tensor") -> np.ndarray:
        """Collapse an elementwise gradient onto a size-1 operand."""
        if g.shape == t.shape:
            return g
        return np.full(t.shape, g.sum(), dtype=g.dtype)

    def __add__(self, other):
        b = self._binary_operands(other, "add")
        if isinstance(b, Tensor):
            out = Tensor._result(self.data + b.data, (self, b))
            if out.requires_grad:
                def _bw(a=self, bb=b, o=out):
                    a._accumulate(Tensor._reduce_to(o.grad, a) if a.size == 1 else o.grad)
                    bb._accumulate(Tensor._reduce_to(o.grad, bb) if bb.size == 1 else o.grad)
                out._backward_fn = _bw
            return out
        out = Tensor._result(self.data + b, (self,))
        if out.requires_grad:
            def _bw(a=self, o=out):
                a._accumulate(o.grad)
            out._backward_fn = _bw
        return out

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        b = self._binary_operands(other, "sub")
        if isinstance(b, Tensor):
            out = Tensor._result(self.data - b.data, (self, b))
            if out.requires_grad:
                def _bw(a=self, bb=b, o=out):
                    a._accumulate(Tensor._reduce_to(o.grad, a) if a.size == 1 else o.grad)
                    bb._accumulate(Tensor._reduce_to(-o.grad, bb) if bb.size == 1 else -o.grad)
                out._backward_fn = _bw
            return out
        out = Tensor._result(self.data - b, (self,))
        if out.requires_grad:
            def _bw(a=self, o=out):
                a._accumulate(o.grad)
            out._backward_fn = _bw
        return out

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __neg__(self):
        out = Tensor._result(-self.data, (self,))
        if out.requires_grad:
            def _bw(a=self, o=out):
                a._accumulate(-o.grad)
            out._backward_fn = _bw
        return out

    def __mul__(self, other):
        b = self._binary_operands(other, "mul")
        if isinstance(b, Tensor):
            out = Tensor._result(self.data * b.data, (self, b))
            if out.requires_grad:
                def _bw(a=self, bb=b, o=out):
                    ga = o.grad * bb.data
                    gb = o.grad * a.data
                    a._accumulate(Tensor._reduce_to(ga, a) if a.size == 1 else ga)
                    bb._accumulate(Tensor._reduce_to(gb, bb) if bb.size == 1 else gb)
                out._backward_fn = _bw
            return out
        out = Tensor._result(self.data * b, (self,))
        if out.requires_grad:
            def _bw(a=self, o=out, s=b):
                a._accumulate(o.grad * s)
            out._backward_fn = _bw
        return out

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        b = self._binary_operands(other, "div")
        if isinstance(b, Tensor):
            out = Tensor._result(self.data / b.data, (self, b))
            if out.requires_grad:
                def _bw(a=self, bb=b, o=out):
                    ga = o.grad / bb.data
                    gb = -o.grad * a.data / (bb.data * bb.data)
                    a._accumulate(Tensor._reduce_to(ga, a) if a.size == 1 else ga)
                    bb._accumulate(Tensor._reduce_to(gb, bb) if bb.size == 1 else gb)
                out._backward_fn = _bw
            return out
        return self.__mul__(1.0 / b)

    def __rtruediv__(self, other):
        s = self._binary_operands(other, "rdiv")
        if isinstance(s, Tensor):  # pragma: no cover - numbers only reach here
            raise TypeError("rdiv expects a scalar numerator")
        out = Tensor._result(s / self.data, (self,))
        if out.requires_grad:
            def _bw(a=self, o=out, c=s):
                a._accumulate(-o.grad * c / (a.data * a.data))
            out._backward_fn = _bw
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("pow supports scalar exponents only")
        out = Tensor._result(self.data ** p, (self,))
        if out.requires_grad:
            def _bw(a=self, o=out, e=p):
                a._accumulate(o.grad * e * a.data ** (e - 1))
            out._backward_fn = _bw
        return out

    # ------------------------------------------------------------------
    # unary transcendentals

    def exp(self):
        out = Tensor._result(np.exp(self.data), (self,))
        if out.requires_grad:
            def _bw(a=self, o=out):
                a._accumulate(o.grad * o.data)
            out._backward_fn = _bw
        return out

    def log(self):
        out = Tensor._result(np.log(self.data), (self,))
        if out.requires_grad:
            def _bw(a=self, o=out):
                a._accumulate(o.grad / a.data)
            out._backward_fn = _bw
        return out

    def sqrt(self):
        out = Tensor._result(np.sqrt(self.data), (self,))
        if out.requires_grad:
            def _bw(a=self, o=out):
                a._accumulate(o.grad * 0.5 / o.data)
            out._backward_fn = _bw
        return out

    def tanh(self):
        out = Tensor._result(np.tanh(self.data), (self,))
        if out.requires_grad:
            def _bw(a=self, o=out):
                a._accumulate(o.grad * (1.0 - o.data * o.data))
            out._backward_fn = _bw
        return out

    def gelu(self):
        """Gaussian error linear unit, tanh approximation.

        gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
        """
        x = self.data
        inner = _GELU_C * (x + _GELU_A * x ** 3)
        t = np.tanh(inner)
        out = Tensor._result(0.5 * x * (1.0 + t), (self,))
        if out.requires_grad:
            def _bw(a=self, o=out, t=t):
                xx = a.data
                dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xx * xx)
                d = 0.5 * (1.0 + t) + 0.5 * xx * (1.0 - t * t) * dinner
                a._accumulate(o.grad * d)
            out._backward_fn = _bw
        return out

    # ------------------------------------------------------------------
    # matmul

    def __matmul__(self, other):
        return self.matmul(other)

    def matmul(self, other: "Tensor") -> "Tensor":
        """Matrix product.

        Supports plain 2-d x 2-d, stacked batches with identical leading
        dimensions ([..., M, K] @ [..., K, N]), and stacked-left times a 2-d
        weight on the right.  No batch-dimension broadcasting.
        """
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor operand")
        a, b = self, other
        if a.data.dtype != b.data.dtype:
            raise TypeError(f"matmul: dtype mismatch {a.data.dtype.name} vs {b.data.dtype.name}")
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: inner extents differ for {a.shape} @ {b.shape}")
        if b.ndim == 2:
            pass  # stacked-left (or plain 2-d) against a weight matrix
        elif a.ndim == b.ndim:
            if a.shape[:-2] != b.shape[:-2]:
                raise ValueError(
                    f"matmul: leading dimensions differ for {a.shape} @ {b.shape} "
                    f"(batch broadcasting is not supported)"
                )
        else:
            raise ValueError(f"matmul: unsupported rank combination {a.shape} @ {b.shape}")
        out = Tensor._result(a.data @ b.data, (a, b))
        if out.requires_grad:
            def _bw(x=a, y=b, o=out):
                g = o.grad
                if x.requires_grad:
                    x._accumulate(g @ np.swapaxes(y.data, -1, -2))
                if y.requires_grad:
                    if y.ndim == 2 and x.ndim > 2:
                        k = x.shape[-1]
                        n = g.shape[-1]
                        y._accumulate(x.data.reshape(-1, k).T @ g.reshape(-1, n))
                    else:
                        y._accumulate(np.swapaxes(x.data, -1, -2) @ g)
            out._backward_fn = _bw
        return out

    # ------------------------------------------------------------------
    # reductions

    def _normalize_axes(self, axes) -> tuple[int, ...]:
        if axes is None:
            return tuple(range(self.ndim))
        if isinstance(axes, int):
            axes = (axes,)
        norm = []
        for ax in axes:
            if not -self.ndim <= ax < self.ndim:
                raise ValueError(f"axis {ax} out of range for shape {self.shape}")
            norm.append(ax % self.ndim)
        if len(set(norm)) != len(norm):
            raise ValueError(f"duplicate axes in {axes}")
        return tuple(sorted(norm))

    def _keepdims_shape(self, axes: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(1 if i in axes else s for i, s in enumerate(self.shape))

    def sum(self, axes=None, keepdims: bool = False):
        axes = self._normalize_axes(axes)
        out = Tensor._result(self.data.sum(axis=axes, keepdims=keepdims), (self,))
        if out.requires_grad:
            kshape = self._keepdims_shape(axes)
            def _bw(a=self, o=out, ks=kshape):
                a._accumulate(np.broadcast_to(o.grad.reshape(ks), a.shape))
            out._backward_fn = _bw
        return out

    def mean(self, axes=None, keepdims: bool = False):
        axes = self._normalize_axes(axes)
        count = 1
        for ax in axes:
            count *= self.shape[ax]
        out = Tensor._result(self.data.mean(axis=axes, keepdims=keepdims), (self,))
        if out.requires_grad:
            kshape = self._keepdims_shape(axes)
            def _bw(a=self, o=out, ks=kshape, c=count):
                a._accumulate(np.broadcast_to(o.grad.reshape(ks) / c, a.shape))
            out._backward_fn = _bw
        return out

    def max(self, axes=None, keepdims: bool = False):
        axes = self._normalize_axes(axes)
        data = self.data.max(axis=axes, keepdims=keepdims)
        out = Tensor._result(data, (self,))
        if out.requires_grad:
            kshape = self._keepdims_shape(axes)
            def _bw(a=self, o=out, ks=kshape, axs=axes):
                mx = o.data.reshape(ks)
                mask = (a.data == mx).astype(a.data.dtype)
                counts = mask.sum(axis=axs, keepdims=True)
                a._accumulate(mask * (o.grad.reshape(ks) / counts))
            out._backward_fn = _bw
        return out

    # ------------------------------------------------------------------
    # shape manipulation

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        new = np.reshape(self.data, shape)  # validates the element count
        out = Tensor._result(np.ascontiguousarray(new), (self,))
        if out.requires_grad:
            def _bw(a=self, o=out):
                a._accumulate(o.grad.reshape(a.shape))
            out._backward_fn = _bw
        return out

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if sorted(axes) != list(range(self.ndim)):
            raise ValueError(f"permute axes {axes} are not a permutation of rank {self.ndim}")
        out = Tensor._result(np.ascontiguousarray(self.data.transpose(axes)), (self,))
        if out.requires_grad:
            inverse = tuple(np.argsort(axes))
            def _bw(a=self, o=out, inv=inverse):
                a._accumulate(o.grad.transpose(inv))
            out._backward_fn = _bw
        return out

    def expand(self, shape) -> "Tensor":
        """Explicit broadcast of size-1 axes up to ``shape`` (same rank)."""
        shape = tuple(shape)
        if len(shape) != self.ndim:
            raise ValueError(f"expand: rank mismatch {self.shape} -> {shape}")
        grown = []
        for i, (s, t) in enumerate(zip(self.shape, shape)):
            if s == t:
                continue
            if s != 1:
                raise ValueError(f"expand: axis {i} of {self.shape} cannot grow to {shape}")
            grown.append(i)
        out = Tensor._result(np.ascontiguousarray(np.broadcast_to(self.data, shape)), (self,))
        if out.requires_grad:
            def _bw(a=self, o=out, axs=tuple(grown)):
                g = o.grad.sum(axis=axs, keepdims=True) if axs else o.grad
                a._accumulate(g)
            out._backward_fn = _bw
        return out

    def pad(self, pads) -> "Tensor":
        """Zero padding; ``pads`` is one (before, after) pair per axis."""
        pads = tuple((int(lo), int(hi)) for lo, hi in pads)
        if len(pads) != self.ndim:
            raise ValueError(f"pad: need {self.ndim} (before, after) pairs, got {len(pads)}")
        if any(lo < 0 or hi < 0 for lo, hi in pads):
            raise ValueError("pad: negative padding is not supported")
        out = Tensor._result(np.pad(self.data, pads), (self,))
        if out.requires_grad:
            sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, self.shape))
            def _bw(a=self, o=out, sl=sl):
                a._accumulate(o.grad[sl])
            out._backward_fn = _bw
        return out

    # ------------------------------------------------------------------
    # softmax family (numerically stable primitives)

    def softmax(self, axis: int = -1):
        """Softmax along one axis, computed with max subtraction."""
        ax = self._normalize_axes((axis,))[0]
        shifted = self.data - self.data.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=ax, keepdims=True)
        out = Tensor._result(s, (self,))
        if out.requires_grad:
            def _bw(a=self, o=out, ax=ax):
                g = o.grad
                sm = o.data
                dot = (g * sm).sum(axis=ax, keepdims=True)
                a._accumulate(sm * (g - dot))
            out._backward_fn = _bw
        return out

    def log_softmax(self, axis: int = -1):
        ax = self._normalize_axes((axis,))[0]
        shifted = self.data - self.data.max(axis=ax, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
        out = Tensor._result(shifted - lse, (self,))
        if out.requires_grad:
            def _bw(a=self, o=out, ax=ax):
                g = o.grad
                sm = np.exp(o.data)
                a._accumulate(g - sm * g.sum(axis=ax, keepdims=True))
            out._backward_fn = _bw
        return out


# ----------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    tolerance: float
    per_input_max_rel_err: list[float] = field(default_factory=list)
    nonfinite: bool = False

    @property
    def max_rel_err(self) -> float:
        return max(self.per_input_max_rel_err, default=0.0)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_err < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        flag = " (non-finite values encountered)" if self.nonfinite else ""
        return f"gradcheck {status}: max rel err {self.max_rel_err:.3e} vs tol {self.tolerance:.1e}{flag}"


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(
    f,
    inputs,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_checks_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic function of the given float64 tensors,
    returning a scalar-shaped Tensor.  It is re-evaluated with coordinates
    of each input perturbed in place by ``+-step``; inputs may equally be
    model parameters that ``f`` closes over, as long as they are passed here
    so the checker knows what to perturb.

    The per-element error is ``|a - n| / max(1, |a|, |n|)``; the report
    carries the max over checked coordinates of each input.
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("gradcheck inputs must be Tensors")
        if t.data.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")

    restore_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    report = GradCheckReport(tolerance=tolerance)
    try:
        out = f(*inputs)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ValueError("gradcheck function must return a scalar-shaped Tensor")
        if not np.isfinite(out.data).all():
            report.nonfinite = True
        out.backward()
        analytic = [
            t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
        ]

        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks_per_input is not None and flat.size > max_checks_per_input:
                gen = rng if rng is not None else np.random.default_rng(0)
                idx = np.sort(gen.choice(flat.size, size=max_checks_per_input, replace=False))
            numeric = np.empty(idx.size, dtype=np.float64)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                hi = f(*inputs).item()
                flat[i] = orig - step
                lo = f(*inputs).item()
                flat[i] = orig
                numeric[j] = (hi - lo) / (2.0 * step)
            if not np.isfinite(numeric).all():
                report.nonfinite = True
            report.per_input_max_rel_err.append(_rel_err(ana.reshape(-1)[idx], numeric))
    finally:
        for t, flag in zip(inputs, restore_flags):
            t.requires_grad = flag
            t.zero_grad()
    return report
