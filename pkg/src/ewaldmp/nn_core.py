"""Reverse-mode differentiation over the closed set of array operations the
model uses, plus layers, optimizers, loss and parameter serialization.

Everything is 64-bit.  A ``Var`` wraps an ndarray and remembers how to push
gradients to its parents; ``backward`` walks the graph in reverse topological
order.  Only the operations defined here exist, there is no general tape for
arbitrary programs.
"""

import zlib

import numpy as np
from scipy.special import expit

from .errors import EmptyBatchError, ShapeError


class Var:
    """Node in the computation graph: a float64 array plus backward rule."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


class Param(Var):
    """Leaf variable whose gradient persists until explicitly cleared."""

    __slots__ = ("name",)

    def __init__(self, name, value):
        # contiguity matters: in-place optimizer updates and gradient checks
        # index the flat view of this buffer
        super().__init__(np.ascontiguousarray(value, dtype=np.float64))
        self.name = name

    def grad_or_zero(self):
        return self.grad if self.grad is not None else np.zeros_like(self.value)


def _as_value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _var_parents(*ops):
    return tuple(x for x in ops if isinstance(x, Var))


def backward(root):
    """Accumulate d(root)/d(leaf) into .grad over the whole graph."""
    if root.value.shape != ():
        raise ShapeError("backward root must be a scalar")
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# operations


def matmul(a, b):
    av, bv = _as_value(a), _as_value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} x {bv.shape}")

    def bwd(g):
        if isinstance(a, Var):
            a.accumulate(g @ bv.T)
        if isinstance(b, Var):
            b.accumulate(av.T @ g)

    return Var(av @ bv, _var_parents(a, b), bwd)


def linear(x, weight, bias=None):
    """x @ W^T + b with W stored (out_features, in_features)."""
    xv, wv = _as_value(x), _as_value(weight)
    if xv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"linear input {xv.shape} incompatible with weight {wv.shape}")
    out = xv @ wv.T
    if bias is not None:
        out = out + _as_value(bias)

    def bwd(g):
        if isinstance(x, Var):
            x.accumulate(g @ wv)
        if isinstance(weight, Var):
            weight.accumulate(g.T @ xv)
        if bias is not None and isinstance(bias, Var):
            bias.accumulate(g.sum(axis=0))

    return Var(out, _var_parents(x, weight, bias), bwd)


def add(a, b):
    av, bv = _as_value(a), _as_value(b)

    def bwd(g):
        if isinstance(a, Var):
            a.accumulate(g)
        if isinstance(b, Var):
            b.accumulate(g.sum(axis=0) if bv.shape != g.shape else g)

    if av.shape != bv.shape and not (av.ndim == 2 and bv.shape == av.shape[1:]):
        raise ShapeError(f"add shapes {av.shape} vs {bv.shape}")
    return Var(av + bv, _var_parents(a, b), bwd)


def add_n(terms):
    values = [_as_value(t) for t in terms]

    def bwd(g):
        for t in terms:
            if isinstance(t, Var):
                t.accumulate(g)

    return Var(sum(values), _var_parents(*terms), bwd)


def sub(a, b):
    av, bv = _as_value(a), _as_value(b)

    def bwd(g):
        if isinstance(a, Var):
            a.accumulate(g)
        if isinstance(b, Var):
            b.accumulate(-g)

    return Var(av - bv, _var_parents(a, b), bwd)


def mul(a, b):
    av, bv = _as_value(a), _as_value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mul shapes {av.shape} vs {bv.shape}")

    def bwd(g):
        if isinstance(a, Var):
            a.accumulate(g * bv)
        if isinstance(b, Var):
            b.accumulate(g * av)

    return Var(av * bv, _var_parents(a, b), bwd)


def scale(x, c):
    c = float(c)

    def bwd(g):
        x.accumulate(g * c)

    return Var(x.value * c, (x,), bwd)


def transpose(x):
    def bwd(g):
        x.accumulate(g.T)

    return Var(x.value.T, (x,), bwd)


def silu(x):
    xv = _as_value(x)
    sig = expit(xv)

    def bwd(g):
        x.accumulate(g * (sig + xv * sig * (1.0 - sig)))

    return Var(xv * sig, (x,), bwd)


def gather_rows(x, index):
    index = np.asarray(index, dtype=np.intp)

    def bwd(g):
        if isinstance(x, Var):
            buf = np.zeros_like(_as_value(x))
            np.add.at(buf, index, g)
            x.accumulate(buf)

    return Var(_as_value(x)[index], _var_parents(x), bwd)


def segment_sum(x, index, n_segments):
    """Sum rows of x into n_segments bins given per-row bin indices."""
    xv = _as_value(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n_segments,) + xv.shape[1:], dtype=np.float64)
    np.add.at(out, index, xv)

    def bwd(g):
        if isinstance(x, Var):
            x.accumulate(g[index])

    return Var(out, _var_parents(x), bwd)


def sum_all(x):
    def bwd(g):
        x.accumulate(np.full_like(x.value, float(g)))

    return Var(np.sum(x.value), (x,), bwd)


def mean_all(x):
    n = x.value.size

    def bwd(g):
        x.accumulate(np.full_like(x.value, float(g) / n))

    return Var(np.mean(x.value), (x,), bwd)


def abs_(x):
    sign = np.sign(x.value)

    def bwd(g):
        x.accumulate(g * sign)

    return Var(np.abs(x.value), (x,), bwd)


def stack_scalars(xs):
    values = np.array([float(_as_value(x)) for x in xs])

    def bwd(g):
        for k, x in enumerate(xs):
            if isinstance(x, Var):
                x.accumulate(np.asarray(g[k]))

    return Var(values, _var_parents(*xs), bwd)


def mae_loss(pred, target):
    """Mean absolute error; raises EmptyBatchError on empty input."""
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0:
        raise EmptyBatchError("mae_loss over an empty batch")
    if pred.value.shape != target.shape:
        raise ShapeError(f"mae_loss shapes {pred.value.shape} vs {target.shape}")
    return mean_all(abs_(sub(pred, target)))


# ---------------------------------------------------------------------------
# parameters


def _named_rng(seed, name):
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def orthogonal(rng, shape, gain=1.0):
    """Orthogonal-scaled initialization (rows or columns orthonormal)."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


class ParamStore:
    """Named parameter registry with seeded deterministic initialization."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._params = {}

    def create(self, name, shape, init="orthogonal", gain=1.0):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        if init == "orthogonal":
            value = orthogonal(_named_rng(self.seed, name), shape, gain)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "normal":
            value = gain * _named_rng(self.seed, name).standard_normal(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def params(self):
        return list(self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def n_values(self):
        return sum(p.value.size for p in self._params.values())

    def set_values(self, values):
        for name, arr in values.items():
            p = self._params[name]
            if p.value.shape != arr.shape:
                raise ShapeError(f"checkpoint shape {arr.shape} for {name} != {p.value.shape}")
            p.value = np.array(arr, dtype=np.float64)

    def get_values(self):
        return {name: p.value.copy() for name, p in self._params.items()}


# ---------------------------------------------------------------------------
# layers


class DenseLayer:
    """y = act(x @ W^T + b), W of shape (out_features, in_features)."""

    def __init__(self, store, name, in_features, out_features, activation="silu", gain=1.0):
        if activation not in ("identity", "silu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = store.create(f"{name}.weight", (out_features, in_features), gain=gain)
        self.bias = store.create(f"{name}.bias", (out_features,), init="zeros")
        self.activation = activation

    def __call__(self, x):
        y = linear(x, self.weight, self.bias)
        return silu(y) if self.activation == "silu" else y


class ResidualBlock:
    """y = (x + D2(silu(D1(silu(x))))) / sqrt(2); both denses are square."""

    def __init__(self, store, name, features):
        self.d1 = DenseLayer(store, f"{name}.d1", features, features, activation="identity")
        self.d2 = DenseLayer(store, f"{name}.d2", features, features, activation="identity")

    def __call__(self, x):
        t = self.d2(silu(self.d1(silu(x))))
        return scale(add(x, t), 1.0 / np.sqrt(2.0))


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.value = p.value - self.lr * p.grad


class Adam:
    """Adam with decoupled weight decay (applied directly to the weights)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = float(weight_decay)
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]
        self._t = 0

    def step(self):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[k] = b1 * self._m[k] + (1.0 - b1) * g
            self._v[k] = b2 * self._v[k] + (1.0 - b2) * g * g
            m_hat = self._m[k] / (1.0 - b1**self._t)
            v_hat = self._v[k] / (1.0 - b2**self._t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update


# ---------------------------------------------------------------------------
# serialization

_FORMAT_HEADER = "ewaldmp-params 1"


def save_params(path, values, meta=None):
    """Write (name, shape, values) records as text; %.17g round-trips f64."""
    with open(path, "w") as fh:
        fh.write(_FORMAT_HEADER + "\n")
        for key, val in (meta or {}).items():
            fh.write(f"meta {key} {val}\n")
        fh.write(f"count {len(values)}\n")
        for name, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"param {name} {arr.ndim} {dims}\n".rstrip() + "\n")
            flat = arr.reshape(-1)
            for lo in range(0, flat.size, 8):
                fh.write(" ".join("%.17g" % v for v in flat[lo : lo + 8]) + "\n")


def load_params(path):
    """Read a parameter container; returns (values, meta)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _FORMAT_HEADER:
        raise ShapeError(f"not a parameter file (expected '{_FORMAT_HEADER}' header)")
    meta, values = {}, {}
    pos = 1
    while pos < len(lines) and lines[pos].startswith("meta "):
        _, key, val = lines[pos].split(" ", 2)
        meta[key] = val
        pos += 1
    count = int(lines[pos].split()[1])
    pos += 1
    for _ in range(count):
        fields = lines[pos].split()
        if fields[0] != "param":
            raise ShapeError(f"malformed record at line {pos + 1}")
        name, ndim = fields[1], int(fields[2])
        shape = tuple(int(v) for v in fields[3 : 3 + ndim])
        pos += 1
        size = int(np.prod(shape)) if shape else 1
        flat = []
        while len(flat) < size:
            flat.extend(float(v) for v in lines[pos].split())
            pos += 1
        values[name] = np.array(flat, dtype=np.float64).reshape(shape)
    return values, meta


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(func, params, h=1e-5, max_entries=None, rng=None):
    """Compare analytic gradients of func() against central differences.

    ``func`` re-evaluates the scalar objective from current parameter values.
    Checks every entry unless ``max_entries`` bounds the per-parameter count
    (entries then chosen by the provided rng).  Returns the worst relative
    error and a per-parameter report.
    """
    for p in params:
        p.grad = None
    root = func()
    backward(root)
    analytic = {p.name: p.grad_or_zero().copy() for p in params}

    worst, report = 0.0, {}
    for p in params:
        size = p.value.size
        idx = np.arange(size)
        if max_entries is not None and size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(size, max_entries, replace=False)
        err = 0.0
        for k in idx:
            pos = np.unravel_index(k, p.value.shape)
            orig = p.value[pos]
            p.value[pos] = orig + h
            up = float(func().value)
            p.value[pos] = orig - h
            down = float(func().value)
            p.value[pos] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[p.name].reshape(-1)[k]
            err = max(err, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        report[p.name] = err
        worst = max(worst, err)
    return worst, report
