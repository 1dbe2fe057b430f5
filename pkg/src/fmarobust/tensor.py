"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery to train a small CNN: a `Tensor` value type, a
`GraphNode` wrapper that records parents plus their local gradient rules,
and the forward ops (conv2d, relu, maxpool2, dense, softmax_logp, a few
elementwise/reduction helpers). `backward` runs one reverse topological
sweep; gradients accumulate across calls until `zero_grad`.

No broadcasting beyond bias addition; all shapes are explicit. Everything
is float64 so that central-finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "GraphNode", "as_node", "parameter", "constant", "backward",
    "add", "sub", "mul", "add_scalar", "mul_scalar", "exp", "clamp_min",
    "reciprocal", "sum_all", "mean_all", "per_sample_sum", "per_sample_mean",
    "scale_rows", "take_per_row", "flatten2d", "relu", "conv2d", "maxpool2",
    "dense", "softmax_logp",
]


def _check_finite(arr: np.ndarray, where: str) -> None:
    # Single fused reduction: any NaN/Inf poisons the sum.
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """A C-contiguous float64 array of fixed shape with finite entries."""

    __slots__ = ("array",)

    def __init__(self, values, _checked: bool = False):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if not _checked:
            _check_finite(arr, "Tensor()")
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self.array.reshape(-1)

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy(), _checked=True)

    def update_(self, values: np.ndarray) -> None:
        """In-place overwrite (optimizer steps, finite-difference probes)."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self.array.shape:
            raise DimensionError(
                f"update_: shape {arr.shape} does not match {self.array.shape}")
        _check_finite(arr, "Tensor.update_()")
        self.array[...] = arr

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class GraphNode:
    """A tensor plus its position in the (acyclic) computation graph.

    `parents` holds (node, vjp) pairs where vjp maps the upstream gradient
    array to this parent's gradient contribution. `grad` is lazily
    materialized and accumulates across backward calls.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    def materialize_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value.array)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"GraphNode(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(values) -> GraphNode:
    """Leaf node that collects gradients."""
    return GraphNode(values, requires_grad=True)


def constant(values) -> GraphNode:
    """Leaf node outside the gradient tape."""
    return GraphNode(values, requires_grad=False)


def as_node(x) -> GraphNode:
    return x if isinstance(x, GraphNode) else constant(x)


def _result(arr: np.ndarray, parents, where: str) -> GraphNode:
    _check_finite(arr, where)
    req = any(p.requires_grad for p, _ in parents)
    kept = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
    return GraphNode(Tensor(arr, _checked=True), kept, requires_grad=req)


def backward(root: GraphNode, on_visit=None) -> None:
    """Reverse-mode sweep from a scalar root.

    Populates `grad` on every requires_grad ancestor; repeated calls
    accumulate. `on_visit` (if given) is called once per node traversed,
    for instrumentation.
    """
    if int(np.prod(root.shape)) != 1:
        raise ContractError(
            f"backward: root must be scalar, got shape {root.shape}")

    # Iterative topological order (post-order DFS).
    topo: list[GraphNode] = []
    seen: set[int] = set()
    stack: list[tuple[GraphNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    # Per-call adjoints kept separate from accumulated .grad so that
    # repeated backward calls add exactly one fresh contribution.
    adjoint: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(topo):
        if on_visit is not None:
            on_visit(node)
        g = adjoint.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = adjoint.get(id(parent))
            if prev is None:
                adjoint[id(parent)] = contrib
            else:
                prev += contrib
    for node in topo:
        g = adjoint.get(id(node))
        if g is not None and node.requires_grad:
            node.materialize_grad()
            node.grad += g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _same_shape(a: GraphNode, b: GraphNode, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> GraphNode:
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "add")
    return _result(a.array + b.array,
                   [(a, lambda g: g), (b, lambda g: g)], "add")


def sub(a, b) -> GraphNode:
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "sub")
    return _result(a.array - b.array,
                   [(a, lambda g: g), (b, lambda g: -g)], "sub")


def mul(a, b) -> GraphNode:
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "mul")
    av, bv = a.array, b.array
    return _result(av * bv,
                   [(a, lambda g: g * bv), (b, lambda g: g * av)], "mul")


def add_scalar(a, c: float) -> GraphNode:
    a = as_node(a)
    return _result(a.array + float(c), [(a, lambda g: g)], "add_scalar")


def mul_scalar(a, c: float) -> GraphNode:
    a = as_node(a)
    c = float(c)
    return _result(a.array * c, [(a, lambda g: g * c)], "mul_scalar")


def exp(a) -> GraphNode:
    a = as_node(a)
    out = np.exp(a.array)
    return _result(out, [(a, lambda g: g * out)], "exp")


def clamp_min(a, floor: float) -> GraphNode:
    """Elementwise max(a, floor); gradient is zero at and below the floor."""
    a = as_node(a)
    floor = float(floor)
    mask = a.array > floor
    return _result(np.maximum(a.array, floor),
                   [(a, lambda g: g * mask)], "clamp_min")


def reciprocal(a) -> GraphNode:
    a = as_node(a)
    out = 1.0 / a.array
    return _result(out, [(a, lambda g: -g * out * out)], "reciprocal")


def sum_all(a) -> GraphNode:
    a = as_node(a)
    shape = a.shape
    return _result(np.asarray(a.array.sum()),
                   [(a, lambda g: np.broadcast_to(g, shape).copy())], "sum_all")


def mean_all(a) -> GraphNode:
    a = as_node(a)
    n = a.value.size
    shape = a.shape
    return _result(np.asarray(a.array.mean()),
                   [(a, lambda g: np.broadcast_to(g / n, shape).copy())],
                   "mean_all")


def per_sample_sum(a) -> GraphNode:
    """Sum over all axes but the first: (N, ...) -> (N,)."""
    a = as_node(a)
    if a.value.array.ndim < 2:
        raise DimensionError("per_sample_sum: need at least 2 dims")
    shape = a.shape
    axes = tuple(range(1, len(shape)))
    expand = (slice(None),) + (None,) * (len(shape) - 1)
    return _result(a.array.sum(axis=axes),
                   [(a, lambda g: np.broadcast_to(g[expand], shape).copy())],
                   "per_sample_sum")


def per_sample_mean(a) -> GraphNode:
    """Mean over all axes but the first: (N, ...) -> (N,)."""
    a = as_node(a)
    if a.value.array.ndim < 2:
        raise DimensionError("per_sample_mean: need at least 2 dims")
    shape = a.shape
    count = int(np.prod(shape[1:]))
    axes = tuple(range(1, len(shape)))
    expand = (slice(None),) + (None,) * (len(shape) - 1)
    return _result(
        a.array.mean(axis=axes),
        [(a, lambda g: np.broadcast_to(g[expand] / count, shape).copy())],
        "per_sample_mean")


def scale_rows(x, s) -> GraphNode:
    """Multiply each leading-axis slice of x (N, ...) by the scalar s[n]."""
    x, s = as_node(x), as_node(s)
    if x.value.array.ndim < 2 or s.value.array.ndim != 1:
        raise DimensionError("scale_rows: expected x (N, ...) and s (N,)")
    if x.shape[0] != s.shape[0]:
        raise DimensionError(
            f"scale_rows: axis 0 mismatch {x.shape[0]} vs {s.shape[0]}")
    expand = (slice(None),) + (None,) * (x.value.array.ndim - 1)
    xv, sv = x.array, s.array
    axes = tuple(range(1, xv.ndim))
    return _result(
        xv * sv[expand],
        [(x, lambda g: g * sv[expand]),
         (s, lambda g: (g * xv).sum(axis=axes))], "scale_rows")


def take_per_row(x, idx) -> GraphNode:
    """Pick one column per row: (N, K), idx (N,) -> (N,)."""
    x = as_node(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.value.array.ndim != 2:
        raise DimensionError("take_per_row: expected 2-D input")
    n, k = x.shape
    if idx.shape != (n,):
        raise DimensionError(f"take_per_row: idx shape {idx.shape} != ({n},)")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ContractError(
            f"take_per_row: index out of range [0, {k})")
    rows = np.arange(n)

    def vjp(g):
        out = np.zeros((n, k))
        out[rows, idx] = g
        return out

    return _result(x.array[rows, idx], [(x, vjp)], "take_per_row")


def flatten2d(x) -> GraphNode:
    """Collapse (N, ...) to (N, D)."""
    x = as_node(x)
    n = x.shape[0]
    shape = x.shape
    return _result(x.array.reshape(n, -1),
                   [(x, lambda g: g.reshape(shape))], "flatten2d")


# ---------------------------------------------------------------------------
# neural-network ops


def relu(x) -> GraphNode:
    x = as_node(x)
    mask = x.array > 0.0
    return _result(x.array * mask, [(x, lambda g: g * mask)], "relu")


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(colg: np.ndarray, xp_shape, k: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[:2]
    gxp = np.zeros(xp_shape)
    colg = colg.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * oh:stride,
                j:j + stride * ow:stride] += colg[:, :, i, j]
    return gxp


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> GraphNode:
    """2-D cross-correlation: (N,C,H,W) * (F,C,k,k) + (F,) -> (N,F,H',W')."""
    x, weight, bias = as_node(x), as_node(weight), as_node(bias)
    if x.value.array.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D, got {x.shape}")
    if weight.value.array.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-D, got {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if wc != c:
        raise DimensionError(
            f"conv2d: channel axis mismatch, input axis 1 has {c}, "
            f"weight axis 1 has {wc}")
    if bias.shape != (f,):
        raise DimensionError(
            f"conv2d: bias axis 0 has {bias.shape}, expected ({f},)")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    k = kh
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {k} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    if padding:
        xp = np.pad(x.array, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    else:
        xp = x.array
    cols = _im2col(xp, k, stride, oh, ow)            # (N, C*k*k, OH*OW)
    w2 = weight.array.reshape(f, c * k * k)
    out = np.matmul(w2, cols) + bias.array[:, None]  # (N, F, OH*OW)
    xp_shape = xp.shape

    def vjp_x(g):
        g2 = g.reshape(n, f, oh * ow)
        colg = np.matmul(w2.T, g2)
        gxp = _col2im(colg, xp_shape, k, stride, oh, ow)
        if padding:
            return gxp[:, :, padding:padding + h, padding:padding + w]
        return gxp

    def vjp_w(g):
        g2 = g.reshape(n, f, oh * ow)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(f, c, k, k)

    def vjp_b(g):
        return g.reshape(n, f, oh * ow).sum(axis=(0, 2))

    return _result(out.reshape(n, f, oh, ow),
                   [(x, vjp_x), (weight, vjp_w), (bias, vjp_b)], "conv2d")


def maxpool2(x) -> GraphNode:
    """2x2 non-overlapping max pool; ties go to the first cell row-major."""
    x = as_node(x)
    if x.value.array.ndim != 4:
        raise DimensionError(f"maxpool2: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(
            f"maxpool2: spatial axes must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = (x.array.reshape(n, c, oh, 2, ow, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, oh, ow, 4))
    arg = windows.argmax(axis=-1)   # first occurrence wins ties
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, oh, ow, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w))

    return _result(out, [(x, vjp)], "maxpool2")


def dense(x, weight, bias) -> GraphNode:
    """Affine map: (N,D) @ (D,K) + (K,) -> (N,K)."""
    x, weight, bias = as_node(x), as_node(weight), as_node(bias)
    if x.value.array.ndim != 2 or weight.value.array.ndim != 2:
        raise DimensionError(
            f"dense: expected 2-D x and weight, got {x.shape}, {weight.shape}")
    n, d = x.shape
    wd, k = weight.shape
    if wd != d:
        raise DimensionError(
            f"dense: inner axes disagree, x axis 1 has {d}, "
            f"weight axis 0 has {wd}")
    if bias.shape != (k,):
        raise DimensionError(
            f"dense: bias axis 0 has {bias.shape}, expected ({k},)")
    xv, wv = x.array, weight.array
    out = xv @ wv + bias.array

    return _result(out, [
        (x, lambda g: g @ wv.T),
        (weight, lambda g: xv.T @ g),
        (bias, lambda g: g.sum(axis=0)),
    ], "dense")


def softmax_logp(logits) -> GraphNode:
    """Numerically stable log-softmax over the last axis of (N,K)."""
    logits = as_node(logits)
    if logits.value.array.ndim != 2:
        raise DimensionError(
            f"softmax_logp: expected 2-D logits, got {logits.shape}")
    if logits.shape[1] < 2:
        raise ContractError("softmax_logp: need at least 2 classes")
    z = logits.array - logits.array.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    p = np.exp(logp)

    def vjp(g):
        return g - p * g.sum(axis=1, keepdims=True)

    return _result(logp, [(logits, vjp)], "softmax_logp")
