"""Dense tensor with reverse-mode automatic differentiation.

Every primitive executed on a tensor that requires a gradient is appended to
a thread-local :class:`ComputationTape`.  :func:`backward` replays the tape
in reverse, accumulating adjoints, and then clears it.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..exceptions import ContractError, DimensionError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def _local():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.tape = ComputationTape()
    return _state


def get_default_dtype():
    return _local().dtype


def set_default_dtype(name):
    if isinstance(name, str):
        if name not in _DTYPES:
            raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
        dtype = _DTYPES[name]
    else:
        dtype = np.dtype(name).type
        if dtype not in _DTYPES.values():
            raise ValueError(f"unsupported dtype {name!r}")
    _local().dtype = dtype


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default floating dtype ("float32" or "float64")."""
    prev = get_default_dtype()
    set_default_dtype(name)
    try:
        yield
    finally:
        _local().dtype = prev


def is_grad_enabled():
    return _local().grad_enabled


@contextlib.contextmanager
def no_grad():
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "generation")

    def __init__(self, op, inputs, output, backward_fn, generation):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.generation = generation


class ComputationTape:
    """Ordered record of primitives executed since the last backward pass."""

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def record(self, op, inputs, output, backward_fn):
        node = _Node(op, inputs, output, backward_fn, self.generation)
        self.nodes.append(node)
        return node

    def clear(self):
        # drop node -> tensor links; tensors keep a stale node that marks them consumed
        for node in self.nodes:
            node.inputs = node.backward_fn = node.output = None
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


def get_tape():
    return _local().tape


def clear_tape():
    get_tape().clear()


class Tensor:
    """Row-major dense array of reals with an optional gradient accumulator."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or get_default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self, None)

    def backward(self):
        backward(self)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(op, data, inputs, backward_fn):
    """Wrap ``data`` as the output of primitive ``op`` and tape it if needed.

    ``backward_fn(grad_out)`` returns one adjoint (or None) per input.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = get_tape().record(op, inputs, out, backward_fn)
    return out


def backward(loss):
    """Populate ``.grad`` on every requires_grad ancestor of a scalar ``loss``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    node = loss._node
    if node is None:
        if loss.requires_grad:
            # leaf scalar: d loss / d loss = 1
            loss.grad = _accumulate(loss.grad, np.ones_like(loss.data))
            return
        raise ContractError("loss does not depend on any tensor requiring grad")
    if node.generation != tape.generation:
        raise ContractError(
            "computation tape already consumed; run a new forward pass before calling backward again"
        )

    grads = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes):
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        nd.output.grad = _accumulate(nd.output.grad, g)
        in_grads = nd.backward_fn(g)
        for t, gi in zip(nd.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise DimensionError(
                    f"adjoint of {nd.op} has shape {gi.shape}, input has {t.shape}"
                )
            key = id(t)
            if t._node is not None and t._node.generation == tape.generation:
                grads[key] = gi if key not in grads else grads[key] + gi
            else:
                t.grad = _accumulate(t.grad, gi.astype(t.data.dtype, copy=False))
    tape.clear()


def _accumulate(existing, g):
    if existing is None:
        return np.array(g, copy=True)
    return existing + g
