"""Dense FP32 tensors with reverse-mode automatic differentiation.

Only the operations the convolutional models in this package need are
implemented, and there is no general broadcasting: shapes must match the
documented signatures exactly. Forward passes record backward rules on the
result tensors; ``Tensor.backward`` replays the recorded operations in
reverse topological order, accumulating gradients into every reachable
tensor that requires them. All forward and backward arithmetic happens in
float32.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class _Node:
    """One recorded operation: its input tensors and a backward rule.

    ``backward`` receives the output gradient and returns one gradient
    array (or None) per input, in input order.
    """

    __slots__ = ("inputs", "backward")

    def __init__(self, inputs, backward):
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A dense float32 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        The receiver must be a scalar (one element); its own gradient is
        seeded with 1.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        tape = _toposort(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(tape):
            node = t._node
            if node is None or t.grad is None:
                continue
            grads = node.backward(t.grad)
            for inp, g in zip(node.inputs, grads):
                if g is None:
                    continue
                if inp.grad is None:
                    inp.grad = np.ascontiguousarray(g, dtype=np.float32)
                else:
                    inp.grad += g


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; deep models would blow the recursion limit.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if id(inp) not in visited:
                    stack.append((inp, False))
    return order


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(inputs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return (ga, gb)

    return _result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply a tensor by a Python scalar."""
    c = float(c)

    def backward(g):
        return (np.float32(c) * g if x.requires_grad else None,)

    return _result(np.float32(c) * x.data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        if not x.requires_grad:
            return (None,)
        return (g * (x.data > 0.0),)

    return _result(out, (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def backward(g):
        if not x.requires_grad:
            return (None,)
        return (np.full_like(x.data, g.reshape(())),)

    return _result(np.asarray(x.data.sum(), dtype=np.float32), (x,), backward)


# ---------------------------------------------------------------------------
# neural-network ops


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a [N,I,H,W] input with a [O,I,kh,kw] kernel.

    Implemented as an im2col gather followed by a batched matmul; the
    direct-summation oracle in the tests pins the semantics.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, ci, h, w = x.shape
    co, ck, kh, kw = kernel.shape
    if ci != ck:
        raise ShapeError(
            f"conv2d channel mismatch: input has {ci} channels, kernel expects {ck}"
        )
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = np.empty((n, ci, kh, kw, ho, wo), dtype=np.float32)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[
                :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
            ]
    cols2 = cols.reshape(n, ci * kh * kw, ho * wo)
    kflat = kernel.data.reshape(co, ci * kh * kw)
    out = np.matmul(kflat, cols2).reshape(n, co, ho, wo)

    def backward(g):
        gm = g.reshape(n, co, ho * wo)
        gk = None
        if kernel.requires_grad:
            gk = np.tensordot(gm, cols2, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(kflat.T, gm).reshape(n, ci, kh, kw, ho, wo)
            gxp = np.zeros((n, ci, hp, wp), dtype=np.float32)
            for di in range(kh):
                for dj in range(kw):
                    gxp[
                        :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
                    ] += dcols[:, :, di, dj]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gk)

    return _result(out, (x, kernel), backward)


def group_norm(
    x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize each (sample, channel group) to zero mean / unit variance,
    then apply the per-channel gamma/beta affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    if not eps > 0:
        raise ShapeError(f"eps must be > 0, got {eps}")
    m = (c // groups) * h * w

    xg = x.data.reshape(n, groups, m)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = ((xg - mean) * inv).reshape(n, c, h, w)
    gb = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gb + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g * gb).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            mean_d = dxhat.mean(axis=2, keepdims=True)
            mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
            gx = (inv * (dxhat - mean_d - xh * mean_dx)).reshape(n, c, h, w)
        return (gx, ggamma, gbeta)

    return _result(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a [N,D] batch by a [D,M] weight and [M] bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}"
        )
    n, d = x.shape
    dw, m = weight.shape
    if d != dw:
        raise ShapeError(f"linear inner dims disagree: input {d}, weight {dw}")
    if bias.shape != (m,):
        raise ShapeError(f"bias must have shape ({m},), got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return (gx, gw, gb)

    return _result(out, (x, weight, bias), backward)


def avg_pool(x: Tensor) -> Tensor:
    """Global spatial average: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        if not x.requires_grad:
            return (None,)
        gx = np.broadcast_to(
            (g / np.float32(h * w))[:, :, None, None], (n, c, h, w)
        ).copy()
        return (gx,)

    return _result(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [N,K] logits against integer labels in [0, K)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(sez)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=np.float32)

    def backward(g):
        if not logits.requires_grad:
            return (None,)
        p = ez / sez
        p[rows, labels] -= 1.0
        return (p * (g.reshape(()) / np.float32(n)),)

    return _result(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_step(params, grads, velocities, lr: float, momentum: float):
    """Classical momentum update, in place: v <- momentum*v + g; p <- p - lr*v.

    Operates on parallel lists of same-shaped float32 arrays and returns
    (params, velocities).
    """
    if not lr > 0:
        raise ShapeError(f"lr must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ShapeError(f"momentum must lie in [0, 1), got {momentum}")
    if not (len(params) == len(grads) == len(velocities)):
        raise ShapeError("params, grads and velocities must have equal length")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(
                f"sgd shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        v *= np.float32(momentum)
        v += g
        p -= np.float32(lr) * v
    return params, velocities


class SGDMomentum:
    """Stateful wrapper around the momentum update for a fixed tensor list.

    Accepts lr == 0 (the update is then a bit-exact no-op on the params),
    which the federation engine relies on.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float):
        if lr < 0:
            raise ShapeError(f"lr must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ShapeError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                raise ShapeError("parameter has no gradient; run backward first")
            v *= np.float32(self.momentum)
            v += p.grad
            p.data -= np.float32(self.lr) * v
