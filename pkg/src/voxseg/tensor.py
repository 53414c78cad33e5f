"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every value flowing through the package is a Tensor: an immutable, row-major
float64 array of rank at most 5, following the (batch, channel, depth, height,
width) axis convention where all five axes are present.  Operations are pure
functions.  When an input has requires_grad set, the output records closures
that map an output gradient back to input gradients; backward() replays the
recorded graph once, in reverse topological order.

The tape is implicit: each Tensor links to the tensors it was computed from.
The Tape class is a registry of named trainable leaves layered on top, used by
the model and optimizer.  Gradients of tensors that do not require them are
never materialized.

Also provides the flat binary tensor container used for checkpoints, case
files, and test fixtures: an 8-byte magic, u32 rank, u64 extents, then
little-endian f64 data, with a JSON sidecar describing shape, dtype, and name.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from scipy import special

from .errors import ContractError, NumericError, ParseError, ShapeError

MAX_RANK = 5
MAGIC = b"VOXTNSR1"


def _require_finite(arr: np.ndarray, op: str) -> None:
    # Fast path: the sum of an all-finite array is finite unless it overflows,
    # so only fall back to the elementwise scan when the sum misbehaves.
    with np.errstate(all="ignore"):
        total = arr.sum()
    if np.isfinite(total):
        return
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: produced a non-finite value")


class Tensor:
    """Immutable float64 array, optionally tracked for differentiation.

    The wrapped array is locked (writeable flag cleared) so no operation can
    mutate a value another tensor shares.  grad is a plain ndarray filled in
    by backward(); it is never itself part of the differentiated graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        _require_finite(arr, "tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents, op: str, check: bool = True) -> "Tensor":
        # Internal constructor for operation outputs: takes ownership of arr
        # (or a view of locked data) without the defensive copy.
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"{op}: rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if check:
            _require_finite(arr, op)
        if arr.flags.writeable:
            arr.flags.writeable = False
        out = cls.__new__(cls)
        out.data = arr
        out._parents = tuple(parents)
        out.requires_grad = bool(out._parents)
        out.grad = None
        out.name = None
        return out

    # ----- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """The underlying (read-only) array."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """The same values with no gradient history."""
        return Tensor._wrap(self.data, (), "detach", check=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{grad}{name})"

    # ----- reverse pass --------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad for every tracked ancestor.

        self must be a scalar; the seed gradient is 1.  Each recorded node is
        visited exactly once, in reverse topological order, so gradients are
        complete before they are propagated further.
        """
        if self.data.size != 1:
            raise ContractError(f"backward: expected a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ContractError("backward: loss is not connected to any trainable leaf")
        topo = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        # Iterative post-order walk; recursion would overflow on deep graphs.
        while stack:
            node, parents = stack[-1]
            entry = next(parents, None)
            if entry is None:
                stack.pop()
                topo.append(node)
                continue
            parent = entry[0]
            if id(parent) not in seen and parent._parents:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            g = node.grad
            for parent, vjp in node._parents:
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib

    # ----- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    """Coerce numbers and arrays to constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum the output gradient over axes the forward pass broadcast.
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----- elementwise arithmetic -------------------------------------------


def _binary(a, b, op: str, fwd, dfa, dfb) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    da, db = ta.data, tb.data
    with np.errstate(all="ignore"):
        out = fwd(da, db)
    parents = []
    if ta.requires_grad:
        parents.append((ta, lambda g: _unbroadcast(dfa(g, da, db), da.shape)))
    if tb.requires_grad:
        parents.append((tb, lambda g: _unbroadcast(dfb(g, da, db), db.shape)))
    return Tensor._wrap(out, parents, op)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a,
        b,
        "div",
        np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(a) -> Tensor:
    ta = as_tensor(a)
    parents = [(ta, lambda g: -g)] if ta.requires_grad else []
    return Tensor._wrap(-ta.data, parents, "neg", check=False)


def power(a, exponent) -> Tensor:
    """Elementwise power with a constant scalar exponent."""
    if isinstance(exponent, Tensor):
        raise ContractError("power: the exponent must be a constant scalar")
    ta = as_tensor(a)
    e = float(exponent)
    with np.errstate(all="ignore"):
        out = ta.data**e
    parents = []
    if ta.requires_grad:
        da = ta.data
        parents.append((ta, lambda g: g * e * da ** (e - 1.0)))
    return Tensor._wrap(out, parents, "power")


def maximum(a, b) -> Tensor:
    """Elementwise maximum; at ties the gradient flows to the first input."""
    return _binary(
        a,
        b,
        "maximum",
        np.maximum,
        lambda g, x, y: g * (x >= y),
        lambda g, x, y: g * (x < y),
    )


# ----- transcendental ----------------------------------------------------


def _unary(a, op: str, fwd, make_vjp) -> Tensor:
    ta = as_tensor(a)
    with np.errstate(all="ignore"):
        out = fwd(ta.data)
    parents = []
    if ta.requires_grad:
        parents.append((ta, make_vjp(ta.data, out)))
    return Tensor._wrap(out, parents, op)


def exp(a) -> Tensor:
    return _unary(a, "exp", np.exp, lambda x, y: lambda g: g * y)


def log(a) -> Tensor:
    return _unary(a, "log", np.log, lambda x, y: lambda g: g / x)


def sqrt(a) -> Tensor:
    return _unary(a, "sqrt", np.sqrt, lambda x, y: lambda g: g / (2.0 * y))


def sigmoid(a) -> Tensor:
    """Numerically stable logistic function, outputs in (0, 1)."""
    return _unary(a, "sigmoid", special.expit, lambda x, y: lambda g: g * y * (1.0 - y))


def relu(a) -> Tensor:
    # Subgradient 0 at the kink.
    return _unary(
        a,
        "relu",
        lambda x: np.maximum(x, 0.0),
        lambda x, y: lambda g: g * (x > 0.0),
    )


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtraction stabilized softmax along one axis.

    Slices along the axis are positive and sum to 1 within 1e-12.
    """
    ta = as_tensor(a)
    out = special.softmax(ta.data, axis=axis)
    parents = []
    if ta.requires_grad:

        def vjp(g, y=out, axis=axis):
            return y * (g - (g * y).sum(axis=axis, keepdims=True))

        parents.append((ta, vjp))
    return Tensor._wrap(out, parents, "softmax")


# ----- reductions and reshaping ------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    out = np.asarray(ta.data.sum(axis=axis, keepdims=keepdims))
    parents = []
    if ta.requires_grad:
        in_shape = ta.data.shape

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, in_shape)
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(ax % len(in_shape) for ax in axes)
                g = np.expand_dims(g, axes)
            return np.broadcast_to(g, in_shape)

        parents.append((ta, vjp))
    return Tensor._wrap(out, parents, "sum", check=False)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    if axis is None:
        count = ta.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= ta.data.shape[ax]
    return tensor_sum(ta, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    ta = as_tensor(a)
    try:
        out = ta.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: {err}") from None
    parents = []
    if ta.requires_grad:
        in_shape = ta.data.shape
        parents.append((ta, lambda g: np.ascontiguousarray(g).reshape(in_shape)))
    return Tensor._wrap(out, parents, "reshape", check=False)


def transpose(a, axes) -> Tensor:
    ta = as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(ta.data, axes)
    parents = []
    if ta.requires_grad:
        inverse = tuple(np.argsort(axes))
        parents.append((ta, lambda g: np.transpose(g, inverse)))
    return Tensor._wrap(out, parents, "transpose", check=False)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=axis)
    parents = []
    start = 0
    axis = axis % out.ndim
    for t in ts:
        n = t.data.shape[axis]
        window = tuple(
            slice(start, start + n) if i == axis else slice(None) for i in range(out.ndim)
        )
        if t.requires_grad:
            parents.append((t, lambda g, w=window: g[w]))
        start += n
    return Tensor._wrap(out, parents, "concat", check=False)


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim != 2 or tb.ndim != 2:
        raise ShapeError(f"matmul: expected rank-2 operands, got {ta.ndim} and {tb.ndim}")
    if ta.shape[1] != tb.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ, {ta.shape[1]} (axis 1) vs {tb.shape[0]} (axis 0)"
        )
    out = ta.data @ tb.data
    parents = []
    if ta.requires_grad:
        parents.append((ta, lambda g, y=tb.data: g @ y.T))
    if tb.requires_grad:
        parents.append((tb, lambda g, x=ta.data: x.T @ g))
    return Tensor._wrap(out, parents, "matmul")


# ----- tape --------------------------------------------------------------


class Tape:
    """Named registry of trainable leaf tensors.

    The operation graph itself lives on the tensors (define-by-run); the tape
    tracks which leaves training may update and hands their gradients to the
    optimizer after a backward pass.
    """

    def __init__(self):
        self._leaves: dict[str, Tensor] = {}

    def leaf(self, data, name: str) -> Tensor:
        t = parameter(data, name=name)
        return self.watch(t, name)

    def watch(self, t: Tensor, name: str) -> Tensor:
        if name in self._leaves:
            raise ContractError(f"tape: duplicate leaf name {name!r}")
        if not t.requires_grad:
            raise ContractError(f"tape: leaf {name!r} does not require gradients")
        if t._parents:
            raise ContractError(f"tape: {name!r} is not a leaf")
        t.name = name
        self._leaves[name] = t
        return t

    @property
    def leaves(self) -> dict[str, Tensor]:
        return dict(self._leaves)

    def __iter__(self):
        return iter(self._leaves.items())

    def __len__(self) -> int:
        return len(self._leaves)

    def __getitem__(self, name: str) -> Tensor:
        return self._leaves[name]

    def zero_grad(self) -> None:
        for t in self._leaves.values():
            t.grad = None


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Run the reverse pass from a scalar loss; gradients per trainable leaf.

    Leaves the tape never saw, and tensors not flagged trainable, get no
    gradient entry.  Leaves unreachable from the loss map to None.
    """
    loss.backward()
    return {name: t.grad for name, t in tape}


# ----- binary container --------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_array(path, arr, name: str | None = None) -> Path:
    """Write one tensor to the flat binary container plus its JSON sidecar.

    Layout: 8-byte magic, u32 rank, u64 extents, then the values as
    little-endian f64 in row-major order.
    """
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"save_array: rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    if arr.ndim == 0 or any(n < 1 for n in arr.shape):
        raise ShapeError(f"save_array: every extent must be at least 1, got {arr.shape}")
    _require_finite(arr, "save_array")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype("<f8", copy=False).tobytes())
    sidecar = {
        "shape": [int(n) for n in arr.shape],
        "dtype": "float64",
        "name": name if name is not None else path.stem,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar) + "\n")
    return path


def load_array(path) -> tuple[np.ndarray, str]:
    """Read one tensor back from the binary container; (values, name)."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"{path}: no such file")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise ParseError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    offset = len(MAGIC)
    (rank,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if rank == 0 or rank > MAX_RANK:
        raise ParseError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    if len(raw) < offset + 8 * rank:
        raise ParseError(f"{path}: truncated extents at offset {offset}")
    shape = struct.unpack_from(f"<{rank}Q", raw, offset)
    offset += 8 * rank
    if any(n < 1 for n in shape):
        raise ParseError(f"{path}: every extent must be at least 1, got {shape}")
    count = 1
    for n in shape:
        count *= n
    expected = offset + 8 * count
    if len(raw) < expected:
        raise ParseError(f"{path}: truncated payload at offset {len(raw)}, expected {expected} bytes")
    if len(raw) > expected:
        raise ParseError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
    arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ParseError(f"{path}: payload contains non-finite values")
    name = path.stem
    sidecar = _sidecar_path(path)
    if sidecar.is_file():
        try:
            meta = json.loads(sidecar.read_text())
        except json.JSONDecodeError as err:
            raise ParseError(f"{sidecar}: invalid JSON ({err})") from None
        if list(meta.get("shape", [])) != [int(n) for n in shape]:
            raise ParseError(
                f"{sidecar}: sidecar shape {meta.get('shape')} disagrees with payload {list(shape)}"
            )
        name = meta.get("name", name)
    return arr, name
