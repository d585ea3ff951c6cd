"""Dense tensors, the recorded computation graph, and reverse-mode gradients.

Everything downstream (blocks, models, losses) is built from the operations
in this module.  A ``Graph`` records one forward pass; ``Graph.backward``
walks the tape in reverse and returns one gradient buffer per trainable
leaf.  Persistent weights live outside any graph as ``Parameter`` objects
and are staged into a graph per forward pass, which is what lets the same
model run in f32 for training and f64 for gradient checking.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class Parameter:
    """A persistent named weight (f32 master copy), mutated only by optimizers."""

    __slots__ = ("name", "data", "trainable")

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tensor:
    """Dense N-d float array attached to a graph node.

    Tensors are immutable once created; new values are produced by ops.
    """

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data: np.ndarray, graph: "Graph", node_id: int):
        self.data = data
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, node={self.node_id})"

    # Operator sugar; dispatches to the module-level ops.
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("inputs", "tensor", "grad_fn", "trainable", "param")

    def __init__(self, inputs, tensor, grad_fn, trainable=False, param=None):
        self.inputs = inputs          # tuple of node ids, all < this node's id
        self.tensor = tensor
        self.grad_fn = grad_fn        # grad_out -> per-input gradients (or None)
        self.trainable = trainable
        self.param = param            # Parameter backing a trainable leaf


class Graph:
    """Tape of recorded operations for one forward pass."""

    def __init__(self, dtype: str = "f32"):
        if dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
        self.dtype = dtype
        self.np_dtype = DTYPES[dtype]
        self.nodes: list[_Node] = []
        self._bound: dict[str, Tensor] = {}

    def _register(self, data, inputs=(), grad_fn=None, trainable=False, param=None) -> Tensor:
        node_id = len(self.nodes)
        for i in inputs:
            if not (0 <= i < node_id):
                raise ValueError("graph inputs must reference earlier nodes")
        t = Tensor(data, self, node_id)
        self.nodes.append(_Node(tuple(inputs), t, grad_fn, trainable, param))
        return t

    def constant(self, data) -> Tensor:
        """A non-trainable leaf; receives no gradient."""
        arr = np.ascontiguousarray(data, dtype=self.np_dtype)
        return self._register(arr)

    def leaf(self, data, trainable: bool = False, param: Parameter | None = None) -> Tensor:
        """A leaf tensor; trainable leaves collect gradients in backward."""
        arr = np.ascontiguousarray(data, dtype=self.np_dtype)
        return self._register(arr, trainable=trainable, param=param)

    def stage(self, param: Parameter) -> Tensor:
        """Stage a persistent Parameter into this graph as a trainable leaf.

        A tensor bound to the parameter's name (see ``bind``) takes its
        place, which is how gradient checking substitutes perturbed values.
        """
        bound = self._bound.get(param.name)
        if bound is not None:
            if bound.shape != param.data.shape:
                raise ValueError(
                    f"bound tensor for {param.name!r} has shape {bound.shape}, "
                    f"expected {param.data.shape}"
                )
            return bound
        return self.leaf(param.data, trainable=param.trainable, param=param)

    def bind(self, name: str, tensor: Tensor) -> None:
        """Substitute ``tensor`` for the parameter named ``name`` when staged."""
        self._bound[name] = tensor

    def trainable_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.trainable]

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse-mode pass from a scalar loss.

        Returns one gradient tensor per trainable leaf, keyed by node id;
        leaves not reachable from the loss get zero gradients.
        """
        if loss.graph is not self:
            raise ValueError("loss tensor belongs to a different graph")
        if loss.shape != ():
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones((), dtype=self.np_dtype)
        }
        for node_id in range(loss.node_id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.grad_fn is None:
                continue
            input_grads = node.grad_fn(g)
            for in_id, ig in zip(node.inputs, input_grads):
                if ig is None:
                    continue
                acc = grads.get(in_id)
                if acc is None:
                    grads[in_id] = ig
                else:
                    grads[in_id] = acc + ig
        out: dict[int, Tensor] = {}
        for node_id in self.trainable_ids():
            node = self.nodes[node_id]
            g = grads.get(node_id)
            if g is None:
                g = np.zeros_like(node.tensor.data)
            if g.shape != node.tensor.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape {node.tensor.data.shape}"
                )
            out[node_id] = Tensor(g, self, node_id)
        return out

    def param_grads(self, grad_map: dict[int, Tensor]) -> dict[str, np.ndarray]:
        """Re-key a backward() result by Parameter name (f32, for optimizers)."""
        out = {}
        for node_id, g in grad_map.items():
            p = self.nodes[node_id].param
            if p is not None:
                out[p.name] = np.asarray(g.data, dtype=np.float32)
        return out


def _same_graph(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ValueError("operands belong to different graphs")
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def _binary_check(a: Tensor, b: Tensor, op: str) -> Graph:
    g = _same_graph(a, b)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _binary_check(a, b, "add")
    return g._register(
        a.data + b.data,
        (a.node_id, b.node_id),
        lambda grad: (grad, grad),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _binary_check(a, b, "sub")
    return g._register(
        a.data - b.data,
        (a.node_id, b.node_id),
        lambda grad: (grad, -grad),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _binary_check(a, b, "mul")
    ad, bd = a.data, b.data
    return g._register(
        ad * bd,
        (a.node_id, b.node_id),
        lambda grad: (grad * bd, grad * ad),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    g = _binary_check(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return g._register(
        out,
        (a.node_id, b.node_id),
        lambda grad: (grad / bd, -grad * out / bd),
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    # Ties route the gradient to the first operand.
    g = _binary_check(a, b, "maximum")
    take_a = a.data >= b.data
    return g._register(
        np.where(take_a, a.data, b.data),
        (a.node_id, b.node_id),
        lambda grad: (np.where(take_a, grad, 0), np.where(take_a, 0, grad)),
    )


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0.
    mask = x.data > 0
    return x.graph._register(
        np.where(mask, x.data, 0),
        (x.node_id,),
        lambda grad: (np.where(mask, grad, 0),),
    )


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return x.graph._register(e, (x.node_id,), lambda grad: (grad * e,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return x.graph._register(y, (x.node_id,), lambda grad: (grad * y * (1.0 - y),))


def scale(x: Tensor, s) -> Tensor:
    s = x.graph.np_dtype(s)
    return x.graph._register(x.data * s, (x.node_id,), lambda grad: (grad * s,))


def add_scalar(x: Tensor, s) -> Tensor:
    s = x.graph.np_dtype(s)
    return x.graph._register(x.data + s, (x.node_id,), lambda grad: (grad,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return x.graph._register(
        np.ascontiguousarray(x.data.reshape(shape)),
        (x.node_id,),
        lambda grad: (grad.reshape(old),),
    )


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, input order preserved."""
    if not xs:
        raise ValueError("concat_channels: empty input list")
    g = _same_graph(*xs)
    first = xs[0].shape
    for x in xs:
        if len(x.shape) != 4:
            raise ValueError("concat_channels expects NCHW tensors")
        if (x.shape[0],) + x.shape[2:] != (first[0],) + first[2:]:
            raise ValueError(
                f"concat_channels: batch/spatial mismatch {x.shape} vs {first}"
            )
    widths = [x.shape[1] for x in xs]
    offsets = np.cumsum([0] + widths)

    def grad_fn(grad):
        return tuple(grad[:, offsets[i]:offsets[i + 1]] for i in range(len(xs)))

    return g._register(
        np.concatenate([x.data for x in xs], axis=1),
        tuple(x.node_id for x in xs),
        grad_fn,
    )


def pad2d(x: Tensor, pad_top: int, pad_bottom: int, pad_left: int, pad_right: int) -> Tensor:
    if len(x.shape) != 4:
        raise ValueError("pad2d expects an NCHW tensor")
    H, W = x.shape[2], x.shape[3]
    out = np.pad(x.data, ((0, 0), (0, 0), (pad_top, pad_bottom), (pad_left, pad_right)))

    def grad_fn(grad):
        return (grad[:, :, pad_top:pad_top + H, pad_left:pad_left + W],)

    return x.graph._register(out, (x.node_id,), grad_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of an NCHW tensor."""
    if len(x.shape) != 4:
        raise ValueError("upsample2x expects an NCHW tensor")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    N, C, H, W = x.shape

    def grad_fn(grad):
        return (grad.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return x.graph._register(out, (x.node_id,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def reduce(x: Tensor, kind: str, axes=None) -> Tensor:
    """Sum or mean over ``axes`` (None = all, () = identity); f64 accumulation."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"reduce kind must be sum or mean, got {kind!r}")
    ndim = x.data.ndim
    if axes is None:
        ax = tuple(range(ndim))
    elif np.isscalar(axes):
        ax = (int(axes),)
    else:
        ax = tuple(int(a) for a in axes)
    if len(set(ax)) != len(ax):
        raise ValueError(f"reduce: duplicate axes {axes}")
    for a in ax:
        if not (0 <= a < ndim):
            raise ValueError(f"reduce: axis {a} out of range for ndim {ndim}")
    if not ax:
        return x.graph._register(x.data.copy(), (x.node_id,), lambda grad: (grad,))

    n = int(np.prod([x.shape[a] for a in ax]))
    acc = np.sum(x.data, axis=ax, dtype=np.float64)
    if kind == "mean":
        acc = acc / n
    out = acc.astype(x.data.dtype)
    in_shape = x.shape
    bshape = tuple(1 if a in ax else s for a, s in enumerate(in_shape))

    def grad_fn(grad):
        gg = np.broadcast_to(grad.reshape(bshape), in_shape)
        if kind == "mean":
            gg = gg / x.graph.np_dtype(n)
        return (np.ascontiguousarray(gg),)

    return x.graph._register(out, (x.node_id,), grad_fn)


# ---------------------------------------------------------------------------
# dense / softmax


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N,D) @ (D,K) + (K,)."""
    g = _same_graph(x, w, b)
    if len(x.shape) != 2 or len(w.shape) != 2:
        raise ValueError("dense expects 2-d input and weight")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"dense: inner dims disagree, {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data

    def grad_fn(grad):
        return (grad @ wd.T, xd.T @ grad, grad.sum(axis=0))

    return g._register(
        xd @ wd + b.data, (x.node_id, w.node_id, b.node_id), grad_fn
    )


def softmax(x: Tensor) -> Tensor:
    """Row softmax of an (N,K) tensor, max-subtracted for stability."""
    if len(x.shape) != 2:
        raise ValueError("softmax expects an (N,K) tensor")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(grad):
        dot = (grad * y).sum(axis=1, keepdims=True)
        return (y * (grad - dot),)

    return x.graph._register(y, (x.node_id,), grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ValueError("log_softmax expects an (N,K) tensor")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def grad_fn(grad):
        return (grad - sm * grad.sum(axis=1, keepdims=True),)

    return x.graph._register(out, (x.node_id,), grad_fn)


# ---------------------------------------------------------------------------
# convolution / pooling


def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int]:
    # Output ceil(size/stride); the extra pixel goes on the bottom/right.
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-d convolution: NCHW input, OIHW weight, per-channel bias."""
    g = _same_graph(x, w, b)
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    N, C, H, W = x.shape
    O, I, kH, kW = w.shape
    if C != I:
        raise ValueError(f"conv2d: input has {C} channels but weight expects {I}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"conv2d: stride must be a positive integer, got {stride}")
    if b.shape != (O,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({O},)")
    if padding == "same":
        pt, pb = _same_pad(H, kH, stride)
        pl, pr = _same_pad(W, kW, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    Hp, Wp = H + pt + pb, W + pl + pr
    if kH > Hp or kW > Wp:
        raise ValueError(
            f"conv2d: kernel ({kH}x{kW}) larger than padded input ({Hp}x{Wp})"
        )
    Ho = (Hp - kH) // stride + 1
    Wo = (Wp - kW) // stride + 1

    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x.data
    view = np.lib.stride_tricks.sliding_window_view(xp, (kH, kW), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]                     # N,C,Ho,Wo,kH,kW
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        N * Ho * Wo, C * kH * kW
    )
    wmat = w.data.reshape(O, C * kH * kW)
    out = (cols @ wmat.T + b.data).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def grad_fn(grad):
        gm = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(N * Ho * Wo, O)
        dw = (gm.T @ cols).reshape(O, C, kH, kW)
        db = gm.sum(axis=0)
        dcols = (gm @ wmat).reshape(N, Ho, Wo, C, kH, kW).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((N, C, Hp, Wp), dtype=grad.dtype)
        for i in range(kH):
            for j in range(kW):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                    dcols[:, :, :, :, i, j]
                )
        dx = dxp[:, :, pt:pt + H, pl:pl + W]
        return (np.ascontiguousarray(dx), dw, db)

    return g._register(
        np.ascontiguousarray(out), (x.node_id, w.node_id, b.node_id), grad_fn
    )


def pool2d(x: Tensor, kind: str, window: int, stride: int) -> Tensor:
    """Valid max/avg pooling; max routes its gradient to the first maximum."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d kind must be max or avg, got {kind!r}")
    if len(x.shape) != 4:
        raise ValueError("pool2d expects an NCHW tensor")
    N, C, H, W = x.shape
    if window > H or window > W:
        raise ValueError(f"pool2d: window {window} exceeds input {H}x{W}")
    if stride < 1:
        raise ValueError("pool2d: stride must be >= 1")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]                     # N,C,Ho,Wo,w,w
    flat = view.reshape(N, C, Ho, Wo, window * window)

    if kind == "avg":
        out = flat.mean(axis=-1, dtype=np.float64).astype(x.data.dtype)

        def grad_fn(grad):
            dx = np.zeros((N, C, H, W), dtype=grad.dtype)
            ge = grad / x.graph.np_dtype(window * window)
            for i in range(window):
                for j in range(window):
                    dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += ge
            return (dx,)

    else:
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def grad_fn(grad):
            dx = np.zeros((N, C, H, W), dtype=grad.dtype)
            nn, cc, hh, ww = np.indices((N, C, Ho, Wo))
            np.add.at(
                dx,
                (nn, cc, hh * stride + idx // window, ww * stride + idx % window),
                grad,
            )
            return (dx,)

    return x.graph._register(np.ascontiguousarray(out), (x.node_id,), grad_fn)


# ---------------------------------------------------------------------------
# fused layers with custom gradients


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply an NCHW tensor by per-(sample, channel) weights of shape (N,C)."""
    g = _same_graph(x, s)
    if len(x.shape) != 4 or s.shape != x.shape[:2]:
        raise ValueError(
            f"scale_channels: expected NCHW and (N,C), got {x.shape} and {s.shape}"
        )
    xd, sd = x.data, s.data

    def grad_fn(grad):
        return (grad * sd[:, :, None, None], (grad * xd).sum(axis=(2, 3)))

    return g._register(xd * sd[:, :, None, None], (x.node_id, s.node_id), grad_fn)


def channel_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-column affine map of an (N,C) tensor: ``x * w + b`` with (C,) vectors."""
    g = _same_graph(x, w, b)
    if len(x.shape) != 2 or w.shape != (x.shape[1],) or b.shape != (x.shape[1],):
        raise ValueError(
            f"channel_affine: expected (N,C) with (C,) vectors, got "
            f"{x.shape}, {w.shape}, {b.shape}"
        )
    xd, wd = x.data, w.data

    def grad_fn(grad):
        return (grad * wd, (grad * xd).sum(axis=0), grad.sum(axis=0))

    return g._register(xd * wd + b.data, (x.node_id, w.node_id, b.node_id), grad_fn)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout mode must be train or infer, got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    keep /= x.graph.np_dtype(1.0 - rate)
    return x.graph._register(
        x.data * keep, (x.node_id,), lambda grad: (grad * keep,)
    )


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.9,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    Train mode normalizes by batch statistics and updates the running
    buffers in place (EMA with decay ``momentum``); infer mode uses the
    running buffers.  Differentiable w.r.t. input, gamma, and beta.
    """
    g = _same_graph(x, gamma, beta)
    if len(x.shape) != 4:
        raise ValueError("batch_norm expects an NCHW tensor")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({C},)")
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm mode must be train or infer, got {mode!r}")
    gd, bd = gamma.data, beta.data

    if mode == "train":
        m = N * H * W
        if m == 1:
            raise ValueError("batch_norm: batch variance undefined for N*H*W == 1")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64).astype(x.data.dtype)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64).astype(x.data.dtype)
        running_mean[:] = momentum * running_mean + (1.0 - momentum) * mean
        running_var[:] = momentum * running_var + (1.0 - momentum) * var
        inv_std = 1.0 / np.sqrt(var + x.graph.np_dtype(epsilon))
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gd[None, :, None, None] * xhat + bd[None, :, None, None]

        def grad_fn(grad):
            dgamma = (grad * xhat).sum(axis=(0, 2, 3))
            dbeta = grad.sum(axis=(0, 2, 3))
            dxhat = grad * gd[None, :, None, None]
            mean_dxhat = dxhat.mean(axis=(0, 2, 3))
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3))
            dx = inv_std[None, :, None, None] * (
                dxhat
                - mean_dxhat[None, :, None, None]
                - xhat * mean_dxhat_xhat[None, :, None, None]
            )
            return (dx, dgamma, dbeta)

    else:
        rm = running_mean.astype(x.data.dtype)
        inv_std = 1.0 / np.sqrt(running_var.astype(x.data.dtype) + x.graph.np_dtype(epsilon))
        xhat = (x.data - rm[None, :, None, None]) * inv_std[None, :, None, None]
        out = gd[None, :, None, None] * xhat + bd[None, :, None, None]

        def grad_fn(grad):
            dgamma = (grad * xhat).sum(axis=(0, 2, 3))
            dbeta = grad.sum(axis=(0, 2, 3))
            dx = grad * (gd * inv_std)[None, :, None, None]
            return (dx, dgamma, dbeta)

    return g._register(out, (x.node_id, gamma.node_id, beta.node_id), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference(
    build: Callable[[Graph, dict[str, Tensor]], Tensor],
    inputs: dict[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar loss w.r.t. every input element."""

    def eval_loss(values: dict[str, np.ndarray]) -> float:
        g = Graph("f64")
        tensors = {k: g.leaf(v, trainable=True) for k, v in values.items()}
        loss = build(g, tensors)
        if loss.shape != ():
            raise ValueError("grad check builder must produce a scalar loss")
        return float(loss.data)

    grads = {}
    base = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    for name, arr in base.items():
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss(base)
            flat[i] = orig - h
            down = eval_loss(base)
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        grads[name] = fd
    return grads


def grad_check(
    build: Callable[[Graph, dict[str, Tensor]], Tensor],
    inputs: dict[str, np.ndarray],
    tolerance: float = 1e-3,
    h: float = 1e-5,
) -> dict:
    """Compare backward gradients against central finite differences.

    ``build(graph, tensors)`` must return a scalar loss computed from the
    staged ``inputs``.  Runs in f64.  Returns a report with the elementwise
    max relative error and a pass flag; raises on non-finite values.
    """
    g = Graph("f64")
    tensors = {k: g.leaf(np.asarray(v, dtype=np.float64), trainable=True) for k, v in inputs.items()}
    loss = build(g, tensors)
    if loss.shape != ():
        raise ValueError("grad check builder must produce a scalar loss")
    if not loss.all_finite():
        raise ValueError("grad check: non-finite loss")
    grad_map = g.backward(loss)
    analytic = {}
    for k, t in tensors.items():
        ga = grad_map[t.node_id].data
        if not np.all(np.isfinite(ga)):
            raise ValueError(f"grad check: non-finite gradient for {k!r}")
        analytic[k] = ga

    numeric = finite_difference(build, inputs, h=h)
    per_input = {}
    max_rel = 0.0
    for k in inputs:
        a, n = analytic[k], numeric[k]
        rel = np.abs(a - n) / (np.maximum(np.abs(a), np.abs(n)) + 1e-6)
        per_input[k] = float(rel.max()) if rel.size else 0.0
        max_rel = max(max_rel, per_input[k])
    return {"max_rel_err": max_rel, "pass": max_rel < tolerance, "per_input": per_input}
