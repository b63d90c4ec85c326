"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Everything runs in double precision on numpy arrays. Operations executed on
tensors that belong to a Tape are recorded; backward() replays the record in
reverse to produce exact gradients for every leaf that requires them. The
primitive set is deliberately small: just enough to express small conv nets
and the attack losses built on top of them.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "SingularInputError",
    "forward_op",
    "backward",
    "sign",
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "matmul",
    "conv2d",
    "avgpool2d",
    "relu",
    "reshape",
    "flatten",
    "unflatten",
    "mean",
    "spatial_center",
    "sum_all",
    "l2_normalize",
    "sq_l2_norm",
    "sqrt",
    "softplus",
    "softmax_xent",
]


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in tensor data or gradients."""


class SingularInputError(ValueError):
    """l2_normalize received an input with (near-)zero norm."""


def _ensure_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {context}")


class Tensor:
    """Dense float64 array, optionally recorded on a tape.

    A tensor that requires gradients must live on a tape; constants may float
    free (they get adopted by whichever tape first consumes them).
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        _ensure_finite(self.data, "tensor data")
        if requires_grad and tape is None:
            raise ValueError("a tensor that requires gradients must be created on a tape")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.node_id = -1
        if tape is not None:
            tape._adopt(self, leaf=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small conveniences; the functional ops below are the real API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__


class _OpRecord:
    __slots__ = ("kind", "inputs", "output", "params")

    def __init__(self, kind, inputs, output, params):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.params = params


class Tape:
    """Ordered record of primitive operations.

    Inputs of every record precede it (construction order), so a single
    reverse sweep computes all adjoints. replay() recomputes every forward
    value from the recorded inputs and checks bit-identity.
    """

    def __init__(self):
        self._records: list[_OpRecord] = []
        self._leaves: list[Tensor] = []
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._records)

    def _adopt(self, t: Tensor, leaf: bool) -> None:
        if t.tape is not None and t.tape is not self:
            raise ValueError("tensor already belongs to a different tape")
        if t.tape is self and t.node_id >= 0:
            return
        t.tape = self
        t.node_id = self._next_id
        self._next_id += 1
        if leaf:
            self._leaves.append(t)

    def _record(self, kind, inputs, output, params) -> None:
        for t in inputs:
            self._adopt(t, leaf=True)  # free constants become leaves here
        self._adopt(output, leaf=False)
        self._records.append(_OpRecord(kind, inputs, output, params))

    def replay(self) -> int:
        """Recompute every recorded forward value; raise if any bit differs.

        Returns the number of records verified.
        """
        for rec in self._records:
            arrs = tuple(t.data for t in rec.inputs)
            out = _FORWARD_KERNELS[rec.kind](arrs, rec.params)
            if not np.array_equal(out, rec.output.data):
                raise AssertionError(f"replay mismatch in op '{rec.kind}'")
        return len(self._records)


def _resolve_tape(inputs: tuple[Tensor, ...]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operation mixes tensors from two different tapes")
    return tape


def _apply(kind: str, inputs: tuple[Tensor, ...], params: dict) -> Tensor:
    arrs = tuple(t.data for t in inputs)
    out_data = _FORWARD_KERNELS[kind](arrs, params)
    _ensure_finite(out_data, f"output of '{kind}'")
    tape = _resolve_tape(inputs)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data)
    out.requires_grad = requires
    if tape is not None:
        tape._record(kind, inputs, out, params)
    elif requires:
        raise ValueError("gradient-requiring op executed without a tape")
    return out


# ---------------------------------------------------------------------------
# forward / backward kernels


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo numpy broadcasting: sum over added and stretched axes
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _k_add(arrs, params):
    return arrs[0] + arrs[1]


def _b_add(g, arrs, out, params):
    return (_reduce_to_shape(g, arrs[0].shape), _reduce_to_shape(g, arrs[1].shape))


def _k_sub(arrs, params):
    return arrs[0] - arrs[1]


def _b_sub(g, arrs, out, params):
    return (_reduce_to_shape(g, arrs[0].shape), -_reduce_to_shape(g, arrs[1].shape))


def _k_mul(arrs, params):
    return arrs[0] * arrs[1]


def _b_mul(g, arrs, out, params):
    a, b = arrs
    return (_reduce_to_shape(g * b, a.shape), _reduce_to_shape(g * a, b.shape))


def _k_mul_scalar(arrs, params):
    return arrs[0] * params["c"]


def _b_mul_scalar(g, arrs, out, params):
    return (g * params["c"],)


def _k_matmul(arrs, params):
    return arrs[0] @ arrs[1]


def _b_matmul(g, arrs, out, params):
    a, b = arrs
    return (g @ b.T, a.T @ g)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    cols = np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(b, oh * ow, c * kh * kw)
    return cols, oh, ow


def _k_conv2d(arrs, params):
    x, w = arrs
    stride = params["stride"]
    f = w.shape[0]
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride)
    out = cols @ w.reshape(f, -1).T
    return out.transpose(0, 2, 1).reshape(x.shape[0], f, oh, ow)


def _b_conv2d(g, arrs, out, params):
    x, w = arrs
    stride = params["stride"]
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    _, _, oh, ow = g.shape
    cols, _, _ = _im2col(x, kh, kw, stride)
    gmat = g.reshape(b, f, oh * ow).transpose(0, 2, 1)  # (B, P, F)
    gw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    dcols = (gmat @ w.reshape(f, -1)).reshape(b, oh, ow, c, kh, kw)
    gx = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )
    return (gx, gw)


def _k_avgpool2d(arrs, params):
    (x,) = arrs
    k = params["k"]
    b, c, h, w = x.shape
    return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))


def _b_avgpool2d(g, arrs, out, params):
    k = params["k"]
    return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)


def _k_relu(arrs, params):
    return np.maximum(arrs[0], 0.0)


def _b_relu(g, arrs, out, params):
    return (g * (arrs[0] > 0.0),)


def _k_reshape(arrs, params):
    return arrs[0].reshape(params["shape"])


def _b_reshape(g, arrs, out, params):
    return (g.reshape(arrs[0].shape),)


def _k_mean(arrs, params):
    return np.asarray(arrs[0].mean())


def _b_mean(g, arrs, out, params):
    x = arrs[0]
    return (np.full(x.shape, float(g) / x.size),)


def _k_sum(arrs, params):
    return np.asarray(arrs[0].sum())


def _b_sum(g, arrs, out, params):
    return (np.full(arrs[0].shape, float(g)),)


def _k_spatial_center(arrs, params):
    x = arrs[0]
    if x.ndim != 4:
        raise ValueError("spatial_center expects (B, C, H, W)")
    return x - x.mean(axis=(2, 3), keepdims=True)


def _b_spatial_center(g, arrs, out, params):
    # projection is symmetric, so the adjoint is the projection itself
    return (g - g.mean(axis=(2, 3), keepdims=True),)


def _norm_of(x: np.ndarray, axis):
    if axis is None:
        return np.asarray(np.sqrt((x * x).sum()))
    return np.sqrt((x * x).sum(axis=axis, keepdims=True))


def _k_l2_normalize(arrs, params):
    x = arrs[0]
    n = _norm_of(x, params["axis"])
    if np.min(n) <= 1e-12:
        raise SingularInputError("l2_normalize: input norm <= 1e-12")
    return x / n


def _b_l2_normalize(g, arrs, out, params):
    x = arrs[0]
    axis = params["axis"]
    n = _norm_of(x, axis)
    if axis is None:
        dot = (x * g).sum()
    else:
        dot = (x * g).sum(axis=axis, keepdims=True)
    return (g / n - x * dot / (n**3),)


def _k_sq_l2_norm(arrs, params):
    x = arrs[0]
    return np.asarray((x * x).sum())


def _b_sq_l2_norm(g, arrs, out, params):
    return (2.0 * float(g) * arrs[0],)


def _k_sqrt(arrs, params):
    x = arrs[0]
    if np.min(x) < 0.0:
        raise ValueError("sqrt of negative value")
    return np.sqrt(x)


def _b_sqrt(g, arrs, out, params):
    return (g / (2.0 * out),)


def _k_softplus(arrs, params):
    x = arrs[0]
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _b_softplus(g, arrs, out, params):
    x = arrs[0]
    return (g / (1.0 + np.exp(-x)),)


def _k_softmax_xent(arrs, params):
    (logits,) = arrs
    labels = params["labels"]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = m[:, 0] + np.log(np.exp(z).sum(axis=1))
    nll = lse - logits[np.arange(logits.shape[0]), labels]
    return np.asarray(nll.mean())


def _b_softmax_xent(g, arrs, out, params):
    (logits,) = arrs
    labels = params["labels"]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(logits.shape[0]), labels] -= 1.0
    return (p * (float(g) / logits.shape[0]),)


_FORWARD_KERNELS = {
    "add": _k_add,
    "sub": _k_sub,
    "mul": _k_mul,
    "mul_scalar": _k_mul_scalar,
    "matmul": _k_matmul,
    "conv2d": _k_conv2d,
    "avgpool2d": _k_avgpool2d,
    "relu": _k_relu,
    "reshape": _k_reshape,
    "mean": _k_mean,
    "spatial_center": _k_spatial_center,
    "sum": _k_sum,
    "l2_normalize": _k_l2_normalize,
    "sq_l2_norm": _k_sq_l2_norm,
    "sqrt": _k_sqrt,
    "softplus": _k_softplus,
    "softmax_xent": _k_softmax_xent,
}

_BACKWARD_KERNELS = {
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "mul_scalar": _b_mul_scalar,
    "matmul": _b_matmul,
    "conv2d": _b_conv2d,
    "avgpool2d": _b_avgpool2d,
    "relu": _b_relu,
    "reshape": _b_reshape,
    "mean": _b_mean,
    "spatial_center": _b_spatial_center,
    "sum": _b_sum,
    "l2_normalize": _b_l2_normalize,
    "sq_l2_norm": _b_sq_l2_norm,
    "sqrt": _b_sqrt,
    "softplus": _b_softplus,
    "softmax_xent": _b_softmax_xent,
}


# ---------------------------------------------------------------------------
# public ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as err:
        raise ValueError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast") from err
    return _apply("add", (a, b), {})


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as err:
        raise ValueError(f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast") from err
    return _apply("sub", (a, b), {})


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as err:
        raise ValueError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast") from err
    return _apply("mul", (a, b), {})


def mul_scalar(a, c: float) -> Tensor:
    return _apply("mul_scalar", (_as_tensor(a),), {"c": float(c)})


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    return _apply("matmul", (a, b), {})


def conv2d(x, w, stride: int = 1) -> Tensor:
    """Valid-padding 2-D convolution; x is (B,C,H,W), w is (F,C,kh,kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d: expects 4-D input and kernel")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d: channel mismatch {x.data.shape[1]} vs {w.data.shape[1]}"
        )
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if x.data.shape[2] < w.data.shape[2] or x.data.shape[3] < w.data.shape[3]:
        raise ValueError("conv2d: kernel larger than input")
    return _apply("conv2d", (x, w), {"stride": int(stride)})


def avgpool2d(x, k: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("avgpool2d: expects 4-D input")
    if x.data.shape[2] % k or x.data.shape[3] % k:
        raise ValueError(f"avgpool2d: spatial dims {x.data.shape[2:]} not divisible by {k}")
    return _apply("avgpool2d", (x,), {"k": int(k)})


def relu(x) -> Tensor:
    return _apply("relu", (_as_tensor(x),), {})


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ValueError(f"reshape: cannot reshape {x.data.shape} to {shape}")
    return _apply("reshape", (x,), {"shape": shape})


def flatten(x) -> Tensor:
    """Rank-1 view with row-major element order."""
    return reshape(x, (-1,))


def unflatten(x, shape) -> Tensor:
    return reshape(x, shape)


def mean(x) -> Tensor:
    return _apply("mean", (_as_tensor(x),), {})


def sum_all(x) -> Tensor:
    return _apply("sum", (_as_tensor(x),), {})


def spatial_center(x) -> Tensor:
    """Remove each sample's per-channel spatial mean; (B, C, H, W) only."""
    return _apply("spatial_center", (_as_tensor(x),), {})


def l2_normalize(x, axis: int | None = None) -> Tensor:
    """Divide by the Euclidean norm (whole tensor, or per-slice along axis)."""
    return _apply("l2_normalize", (_as_tensor(x),), {"axis": axis})


def sq_l2_norm(x) -> Tensor:
    return _apply("sq_l2_norm", (_as_tensor(x),), {})


def sqrt(x) -> Tensor:
    return _apply("sqrt", (_as_tensor(x),), {})


def softplus(x) -> Tensor:
    return _apply("softplus", (_as_tensor(x),), {})


def softmax_xent(logits, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ValueError("softmax_xent: logits must be (B,K) with labels (B,)")
    return _apply("softmax_xent", (logits,), {"labels": labels})


_DISPATCH = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "mean": mean,
    "spatial_center": spatial_center,
    "sum": sum_all,
    "flatten": flatten,
    "l2_normalize": l2_normalize,
    "sq_l2_norm": sq_l2_norm,
    "sqrt": sqrt,
    "softplus": softplus,
}


def kernel(kind: str, *arrays, **params) -> np.ndarray:
    """Run a forward kernel directly on numpy arrays, no tape involved.

    Shares the exact kernel code with the recorded path, so a plain forward
    and a taped forward of the same arrays are bit-identical.
    """
    arrs = tuple(np.asarray(a, dtype=np.float64) for a in arrays)
    return _FORWARD_KERNELS[kind](arrs, params)


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Uniform entry point over the primitive vocabulary."""
    if kind == "mul_scalar":
        return mul_scalar(inputs[0], params["c"])
    if kind == "conv2d":
        return conv2d(*inputs, stride=params.get("stride", 1))
    if kind == "avgpool2d":
        return avgpool2d(inputs[0], params["k"])
    if kind == "reshape":
        return reshape(inputs[0], params["shape"])
    if kind == "softmax_xent":
        return softmax_xent(inputs[0], params["labels"])
    if kind not in _DISPATCH:
        raise ValueError(f"unknown op kind '{kind}'")
    return _DISPATCH[kind](*inputs)


def backward(output: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar output.

    Sets .grad on every gradient-requiring leaf of the tape and returns the
    same map keyed by tensor. Leaves the output does not depend on get zeros.
    """
    if output.tape is None:
        raise ValueError("backward: output was not recorded on a tape")
    if output.data.shape != ():
        raise ValueError(
            f"backward: output must be scalar, got shape {output.data.shape}; reduce with mean/sum first"
        )
    tape = output.tape
    if not tape._records:
        raise ValueError("backward: tape is empty")

    grads: dict[int, np.ndarray] = {output.node_id: np.ones((), dtype=np.float64)}
    for rec in reversed(tape._records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        partials = _BACKWARD_KERNELS[rec.kind](
            g, tuple(t.data for t in rec.inputs), rec.output.data, rec.params
        )
        for t, p in zip(rec.inputs, partials):
            if not t.requires_grad or p is None:
                continue
            acc = grads.get(t.node_id)
            grads[t.node_id] = p if acc is None else acc + p

    result: dict[Tensor, np.ndarray] = {}
    for leaf in tape._leaves:
        if not leaf.requires_grad:
            continue
        g = grads.get(leaf.node_id)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.asarray(g, dtype=np.float64)
            _ensure_finite(g, "gradient")
        leaf.grad = g
        result[leaf] = g
    return result


def sign(t):
    """Elementwise -1/0/+1; sign(0) is 0. Works on tensors and arrays."""
    if isinstance(t, Tensor):
        return Tensor(np.sign(t.data))
    return np.sign(np.asarray(t, dtype=np.float64))
