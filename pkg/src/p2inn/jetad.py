"""Second-order jets pushed forward through a network, differentiated in reverse.

A :class:`Jet` is a *batch* of truncated Taylor expansions.  For N points and a
layer width w its data is one float64 array of shape ``(1 + k + m, N, w)``::

    data[0]          value
    data[1:1+k]      first partials along k input directions
    data[1+k:]       pure second partials along m of those directions

Only pure second partials are carried (no mixed terms).  Every component is an
ordinary differentiable array as far as the :class:`Tape` is concerned, so a
loss assembled from u, u_t, u_x, u_xx can be reverse-differentiated with
respect to the network parameters in one sweep.

The tape is rebuilt for every training step; nothing is retained between
passes.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, UsageError

__all__ = [
    "Tape",
    "Node",
    "Jet",
    "seed",
    "lift",
    "jet_affine",
    "jet_activate",
    "jet_mul",
    "jet_add",
    "jet_sub",
    "jet_scale",
    "jet_add_const",
    "jet_add_value",
    "component",
    "gather_rows",
    "mean_square",
    "take_columns",
    "modulated_matrix",
    "backward",
]


class Node:
    __slots__ = ("index", "value", "op", "parents", "kwargs", "requires_grad", "store", "start")

    def __init__(self, index, value, op=None, parents=(), kwargs=None,
                 requires_grad=False, store=None, start=0):
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.kwargs = kwargs or {}
        self.requires_grad = requires_grad
        self.store = store
        self.start = start

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Ordered record of primitive operations.

    Leaves are either constants or *parameter slots*: views into a flat
    parameter store (a 1-D float64 array).  ``backward`` returns gradients laid
    out like the stores passed as ``wrt``.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, **kw) -> Node:
        node = Node(len(self.nodes), value, **kw)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._push(np.asarray(value, dtype=np.float64))

    def param(self, store: np.ndarray, start: int, shape) -> Node:
        size = int(np.prod(shape))
        if start < 0 or start + size > store.size:
            raise ConfigurationError(f"parameter slot [{start}, {start + size}) outside store of length {store.size}")
        view = store[start:start + size].reshape(shape)
        return self._push(view, requires_grad=True, store=store, start=start)

    def apply(self, op, parents, **kwargs) -> Node:
        value = op.forward(*[p.value for p in parents], **kwargs)
        rg = any(p.requires_grad for p in parents)
        return self._push(value, op=op, parents=tuple(parents), kwargs=kwargs, requires_grad=rg)

    def replay(self) -> None:
        """Recompute every node from its parents (parameter leaves re-read their stores)."""
        for node in self.nodes:
            if node.op is None:
                if node.store is not None:
                    size = node.value.size
                    node.value = node.store[node.start:node.start + size].reshape(node.value.shape)
                continue
            node.value = node.op.forward(*[p.value for p in node.parents], **node.kwargs)

    def backward(self, out, wrt):
        """Reverse sweep from the scalar ``out``.

        ``wrt`` is one parameter store or a list of them; the result mirrors it.
        Parameter slots belonging to other stores, and constants, get nothing.
        """
        if not self.nodes:
            raise UsageError("backward() called on an empty tape")
        out_node = out.node if isinstance(out, Jet) else out
        if out_node.value.size != 1:
            raise UsageError(f"backward() needs a scalar seed, got shape {out_node.value.shape}")
        single = isinstance(wrt, np.ndarray)
        stores = [wrt] if single else list(wrt)
        grads = [np.zeros_like(s, dtype=np.float64) for s in stores]
        slot = {id(s): i for i, s in enumerate(stores)}

        adj = [None] * len(self.nodes)
        adj[out_node.index] = np.ones_like(out_node.value)
        for node in reversed(self.nodes[:out_node.index + 1]):
            g = adj[node.index]
            if g is None:
                continue
            adj[node.index] = None
            if node.op is None:
                i = slot.get(id(node.store)) if node.store is not None else None
                if i is not None:
                    grads[i][node.start:node.start + g.size] += g.ravel()
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            pgrads = node.op.backward(g, node.value, [p.value for p in node.parents], needs, **node.kwargs)
            for p, gp in zip(node.parents, pgrads):
                if gp is None or not p.requires_grad:
                    continue
                prev = adj[p.index]
                adj[p.index] = gp if prev is None else prev + gp
        return grads[0] if single else grads


def backward(tape: Tape, out, wrt):
    """Module-level alias of :meth:`Tape.backward`."""
    return tape.backward(out, wrt)


class Jet:
    """A batch of second-order jets living on a tape.

    ``first`` lists the input columns whose first partials are carried;
    ``second`` lists positions *within* ``first`` whose pure second partials
    are carried.
    """

    __slots__ = ("tape", "node", "first", "second")

    def __init__(self, tape: Tape, node: Node, first=(), second=()):
        self.tape = tape
        self.node = node
        self.first = tuple(first)
        self.second = tuple(second)

    @property
    def data(self) -> np.ndarray:
        return self.node.value

    @property
    def k(self) -> int:
        return len(self.first)

    @property
    def m(self) -> int:
        return len(self.second)

    @property
    def value(self) -> np.ndarray:
        return self.node.value[0]

    @property
    def d1(self) -> np.ndarray:
        return self.node.value[1:1 + self.k]

    @property
    def d2(self) -> np.ndarray:
        return self.node.value[1 + self.k:]

    @property
    def width(self) -> int:
        return self.node.value.shape[2]

    @property
    def npoints(self) -> int:
        return self.node.value.shape[1]

    def d1_along(self, col: int) -> np.ndarray:
        return self.d1[self._pos(col)]

    def d2_along(self, col: int) -> np.ndarray:
        pos = self._pos(col)
        if pos not in self.second:
            raise ConfigurationError(f"jet does not carry a second partial along input column {col}")
        return self.d2[self.second.index(pos)]

    def _pos(self, col):
        if col not in self.first:
            raise ConfigurationError(f"jet does not carry a first partial along input column {col}")
        return self.first.index(col)

    def scalar(self) -> float:
        return float(self.node.value.reshape(-1)[0])

    def _like(self, node):
        return Jet(self.tape, node, self.first, self.second)


# ---------------------------------------------------------------------------
# primitive operations (forward value + hand-written adjoint)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class _Affine:
    @staticmethod
    def forward(J, W, b=None):
        C, N, _ = J.shape
        out = (J.reshape(C * N, -1) @ W.T).reshape(C, N, W.shape[0])
        if b is not None:
            out[0] += b
        return out

    @staticmethod
    def backward(G, out, vals, needs):
        J, W = vals[0], vals[1]
        C, N, fan_in = J.shape
        G2 = G.reshape(C * N, -1)
        gJ = (G2 @ W).reshape(C, N, fan_in) if needs[0] else None
        gW = G2.T @ J.reshape(C * N, fan_in) if needs[1] else None
        res = [gJ, gW]
        if len(vals) == 3:
            res.append(G[0].sum(axis=0) if needs[2] else None)
        return res


class _Tanh:
    @staticmethod
    def forward(J, k, sec):
        s = np.tanh(J[0])
        out = np.empty_like(J)
        out[0] = s
        if J.shape[0] == 1:
            return out
        s1 = 1.0 - s * s
        out[1:1 + k] = s1 * J[1:1 + k]
        if len(sec):
            ad = J[1:1 + k][list(sec)]
            s2 = -2.0 * s * s1
            out[1 + k:] = s2 * ad * ad + s1 * J[1 + k:]
        return out

    @staticmethod
    def backward(G, out, vals, needs, k, sec):
        J = vals[0]
        s = out[0]
        s1 = 1.0 - s * s
        gJ = np.empty_like(J)
        gJ[0] = G[0] * s1
        if J.shape[0] == 1:
            return [gJ]
        a = J[1:1 + k]
        G1 = G[1:1 + k]
        s2 = -2.0 * s * s1
        gJ[0] += s2 * np.einsum("knw,knw->nw", G1, a)
        ga = G1 * s1
        if len(sec):
            c = J[1 + k:]
            G2 = G[1 + k:]
            idx = list(sec)
            ad = a[idx]
            s3 = -2.0 * s1 * s1 - 2.0 * s * s2
            gJ[0] += np.einsum("mnw,mnw->nw", G2, s3 * ad * ad + s2 * c)
            ga[idx] += 2.0 * s2 * G2 * ad
            gJ[1 + k:] = G2 * s1
        gJ[1:1 + k] = ga
        return [gJ]


class _Relu:
    @staticmethod
    def forward(J, k, sec):
        h = (J[0] > 0).astype(np.float64)
        return J * h

    @staticmethod
    def backward(G, out, vals, needs, k, sec):
        h = (vals[0][0] > 0).astype(np.float64)
        return [G * h]


_ACTIVATIONS = {"tanh": _Tanh, "relu": _Relu}
_SMOOTH = {"tanh"}


class _Mul:
    @staticmethod
    def forward(A, B, k, sec):
        out = np.empty(np.broadcast_shapes(A.shape, B.shape))
        a0, b0 = A[0], B[0]
        out[0] = a0 * b0
        if out.shape[0] == 1:
            return out
        out[1:1 + k] = a0 * B[1:1 + k] + b0 * A[1:1 + k]
        if len(sec):
            idx = list(sec)
            out[1 + k:] = a0 * B[1 + k:] + 2.0 * A[1:1 + k][idx] * B[1:1 + k][idx] + b0 * A[1 + k:]
        return out

    @staticmethod
    def backward(G, out, vals, needs, k, sec):
        A, B = vals
        a0, b0 = A[0], B[0]
        gA = np.empty(G.shape)
        gB = np.empty(G.shape)
        gA[0] = G[0] * b0
        gB[0] = G[0] * a0
        if G.shape[0] > 1:
            G1 = G[1:1 + k]
            a1, b1 = A[1:1 + k], B[1:1 + k]
            gA[0] += (G1 * b1).sum(axis=0)
            gB[0] += (G1 * a1).sum(axis=0)
            ga1 = G1 * b0
            gb1 = G1 * a0
            if len(sec):
                idx = list(sec)
                G2 = G[1 + k:]
                gA[0] += (G2 * B[1 + k:]).sum(axis=0)
                gB[0] += (G2 * A[1 + k:]).sum(axis=0)
                ga1[idx] += 2.0 * G2 * b1[idx]
                gb1[idx] += 2.0 * G2 * a1[idx]
                gA[1 + k:] = G2 * b0
                gB[1 + k:] = G2 * a0
            gA[1:1 + k] = ga1
            gB[1:1 + k] = gb1
        return [_unbroadcast(gA, A.shape) if needs[0] else None,
                _unbroadcast(gB, B.shape) if needs[1] else None]


class _Add:
    @staticmethod
    def forward(A, B, sign):
        return A + sign * B

    @staticmethod
    def backward(G, out, vals, needs, sign):
        A, B = vals
        return [_unbroadcast(G, A.shape) if needs[0] else None,
                _unbroadcast(sign * G, B.shape) if needs[1] else None]


class _Scale:
    @staticmethod
    def forward(A, c):
        return A * c

    @staticmethod
    def backward(G, out, vals, needs, c):
        return [_unbroadcast(G * c, vals[0].shape)]


class _AddConst:
    @staticmethod
    def forward(A, c):
        out = A.copy()
        out[0] += c
        return out

    @staticmethod
    def backward(G, out, vals, needs, c):
        return [G]


class _AddValue:
    @staticmethod
    def forward(A, P):
        out = A.copy()
        out[0] += P[0]
        return out

    @staticmethod
    def backward(G, out, vals, needs):
        return [G if needs[0] else None, _unbroadcast(G[:1], vals[1].shape) if needs[1] else None]


class _Slice:
    @staticmethod
    def forward(A, start, stop):
        return A[start:stop].copy()

    @staticmethod
    def backward(G, out, vals, needs, start, stop):
        g = np.zeros_like(vals[0])
        g[start:stop] = G
        return [g]


class _Gather:
    @staticmethod
    def forward(A, index):
        return A[:, index]

    @staticmethod
    def backward(G, out, vals, needs, index):
        g = np.zeros_like(vals[0])
        np.add.at(g, (slice(None), index), G)
        return [g]


class _MeanSquare:
    @staticmethod
    def forward(A):
        return np.full((1, 1, 1), np.mean(A * A))

    @staticmethod
    def backward(G, out, vals, needs):
        A = vals[0]
        return [G.reshape(()) * (2.0 / A.size) * A]


class _Columns:
    @staticmethod
    def forward(W, start, stop):
        return W[:, start:stop].copy()

    @staticmethod
    def backward(G, out, vals, needs, start, stop):
        g = np.zeros_like(vals[0])
        g[:, start:stop] = G
        return [g]


class _Modulated:
    """W = Psi @ diag(alpha) @ Phi^T with Psi, Phi held constant."""

    @staticmethod
    def forward(alpha, psi, phi):
        return (psi * alpha) @ phi.T

    @staticmethod
    def backward(G, out, vals, needs):
        _, psi, phi = vals
        galpha = np.einsum("ji,jk,ki->i", psi, G, phi) if needs[0] else None
        return [galpha, None, None]


# ---------------------------------------------------------------------------
# public jet constructors and operations


def seed(tape: Tape, points, first=(), second=()) -> Jet:
    """Jets for raw input coordinates.

    ``points`` is (N, d).  ``first`` names the input columns to differentiate
    along, ``second`` the subset of those columns whose pure second partial is
    wanted.  Each seeded jet has value x, unit first partial along its own
    column and zero second partials.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ConfigurationError(f"points must be (N, d), got shape {pts.shape}")
    first = tuple(int(c) for c in first)
    if len(set(first)) != len(first) or any(c < 0 or c >= pts.shape[1] for c in first):
        raise ConfigurationError(f"bad derivative columns {first} for {pts.shape[1]} inputs")
    pos = []
    for c in second:
        if c not in first:
            raise ConfigurationError(f"second-order column {c} must also be a first-order column")
        pos.append(first.index(c))
    k, m = len(first), len(pos)
    data = np.zeros((1 + k + m,) + pts.shape)
    data[0] = pts
    for i, c in enumerate(first):
        data[1 + i, :, c] = 1.0
    return Jet(tape, tape.const(data), first, tuple(pos))


def lift(tape: Tape, values, like: Jet | None = None) -> Jet:
    """A constant (N, w) array as a value-only jet, or shaped like ``like`` with zero derivatives."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if like is None:
        return Jet(tape, tape.const(v[None]))
    data = np.zeros((like.data.shape[0],) + v.shape)
    data[0] = v
    return Jet(tape, tape.const(data), like.first, like.second)


def jet_affine(inputs: Jet, weight: Node, bias: Node | None = None) -> Jet:
    """y = W x + b applied componentwise; affine maps commute with differentiation."""
    if weight.value.ndim != 2 or weight.value.shape[1] != inputs.width:
        raise ConfigurationError(
            f"weight of shape {weight.value.shape} cannot act on inputs of width {inputs.width}")
    parents = [inputs.node, weight]
    if bias is not None:
        if bias.value.shape != (weight.value.shape[0],):
            raise ConfigurationError(f"bias shape {bias.value.shape} does not match weight {weight.value.shape}")
        parents.append(bias)
    return inputs._like(inputs.tape.apply(_Affine, parents))


def jet_activate(inputs: Jet, kind: str = "tanh") -> Jet:
    """Pointwise activation; second partials follow Faa di Bruno to order two."""
    if kind not in _ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {kind!r}")
    if inputs.m and kind not in _SMOOTH:
        raise ConfigurationError(f"activation {kind!r} has no second derivative but one was requested")
    node = inputs.tape.apply(_ACTIVATIONS[kind], [inputs.node], k=inputs.k, sec=inputs.second)
    return inputs._like(node)


def _check_layout(a: Jet, b: Jet):
    if a.first != b.first or a.second != b.second:
        raise ConfigurationError("jets track different derivative directions")
    if a.tape is not b.tape:
        raise UsageError("jets live on different tapes")


def jet_mul(a: Jet, b: Jet) -> Jet:
    """Leibniz product to order two."""
    _check_layout(a, b)
    node = a.tape.apply(_Mul, [a.node, b.node], k=a.k, sec=a.second)
    return a._like(node)


def jet_add(a: Jet, b: Jet) -> Jet:
    _check_layout(a, b)
    return a._like(a.tape.apply(_Add, [a.node, b.node], sign=1.0))


def jet_sub(a: Jet, b: Jet) -> Jet:
    _check_layout(a, b)
    return a._like(a.tape.apply(_Add, [a.node, b.node], sign=-1.0))


def jet_scale(a: Jet, c) -> Jet:
    """Multiply every component by a constant (scalar or per-point array)."""
    c = np.asarray(c, dtype=np.float64)
    return a._like(a.tape.apply(_Scale, [a.node], c=c))


def jet_add_const(a: Jet, c) -> Jet:
    """Add a constant to the value component only."""
    c = np.asarray(c, dtype=np.float64)
    return a._like(a.tape.apply(_AddConst, [a.node], c=c))


def jet_add_value(a: Jet, p: Jet) -> Jet:
    """Add a value-only jet ``p`` (no tracked derivatives) to the value of ``a``."""
    if p.k or p.m:
        raise ConfigurationError("jet_add_value expects a value-only jet")
    return a._like(a.tape.apply(_AddValue, [a.node, p.node]))


def component(a: Jet, which: str, i: int = 0) -> Jet:
    """Extract value / d1[i] / d2[i] as a value-only jet."""
    if which == "value":
        start = 0
    elif which == "d1":
        if not 0 <= i < a.k:
            raise ConfigurationError(f"jet carries {a.k} first partials, asked for #{i}")
        start = 1 + i
    elif which == "d2":
        if not 0 <= i < a.m:
            raise ConfigurationError(f"jet carries {a.m} second partials, asked for #{i}")
        start = 1 + a.k + i
    else:
        raise ConfigurationError(f"unknown jet component {which!r}")
    return Jet(a.tape, a.tape.apply(_Slice, [a.node], start=start, stop=start + 1))


def gather_rows(a: Jet, index) -> Jet:
    """Row gather along the point axis (used to broadcast per-instance codes to points)."""
    index = np.asarray(index, dtype=np.intp)
    return a._like(a.tape.apply(_Gather, [a.node], index=index))


def mean_square(a: Jet) -> Jet:
    if a.k or a.m:
        raise ConfigurationError("mean_square expects a value-only jet")
    return Jet(a.tape, a.tape.apply(_MeanSquare, [a.node]))


def take_columns(tape: Tape, weight: Node, start: int, stop: int) -> Node:
    return tape.apply(_Columns, [weight], start=start, stop=stop)


def modulated_matrix(tape: Tape, alpha: Node, psi: Node, phi: Node) -> Node:
    if alpha.value.shape != (psi.value.shape[1],) or psi.value.shape[1] != phi.value.shape[1]:
        raise ConfigurationError("singular-value vector does not match its bases")
    return tape.apply(_Modulated, [alpha, psi, phi])
