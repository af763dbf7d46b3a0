"""Minimal reverse-mode neural substrate.

A Tape records primitive numpy operations during a forward pass; the
reverse pass walks the records backwards exactly once and accumulates
gradients into a ParameterStore. One gradient engine serves both
forecasters and the finite-difference check suite guards it.

Everything is float64; desk-scale problem sizes make precision cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TapeError(Exception):
    pass


class StaleTapeError(TapeError):
    """Raised when a tape's reverse pass is requested twice."""


class GradientError(Exception):
    """Non-finite gradients detected at update time."""


class Var:
    """A value on the tape. Constants carry need=False and get no grads."""

    __slots__ = ("value", "grad", "tape", "need")

    def __init__(self, value, tape=None, need=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.need = need

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Forward recording; creation order is a valid topological order."""

    def __init__(self):
        self._nodes = []
        self._leaves = []          # (store, name, var)
        self._leaf_cache = {}      # (id(store), name) -> Var
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def constant(self, value) -> Var:
        return Var(value, tape=self, need=False)


def constant(value) -> Var:
    return Var(value, tape=None, need=False)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _acc(var: Var, g):
    if not var.need:
        return
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] > 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _emit(a_tape, parents, value, back) -> Var:
    need = any(p.need for p in parents)
    out = Var(value, tape=a_tape, need=need)
    if a_tape is not None and need:
        a_tape._nodes.append((out, back))
    return out


def _tape_of(*vars_):
    for v in vars_:
        if v.tape is not None:
            return v.tape
    return None


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    value = a.value + b.value

    def back(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return _emit(_tape_of(a, b), (a, b), value, back)


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    value = a.value - b.value

    def back(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(-g, b.value.shape))

    return _emit(_tape_of(a, b), (a, b), value, back)


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    value = a.value * b.value

    def back(g):
        _acc(a, _unbroadcast(g * b.value, a.value.shape))
        _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return _emit(_tape_of(a, b), (a, b), value, back)


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    av, bv = a.value, b.value
    value = av @ bv

    if av.ndim == 2 and bv.ndim == 2:
        def back(g):
            _acc(a, g @ bv.T)
            _acc(b, av.T @ g)
    elif av.ndim == 1 and bv.ndim == 2:
        def back(g):
            _acc(a, bv @ g)
            _acc(b, np.outer(av, g))
    elif av.ndim == 2 and bv.ndim == 1:
        def back(g):
            _acc(a, np.outer(g, bv))
            _acc(b, av.T @ g)
    else:
        raise TapeError(f"unsupported matmul dims {av.ndim} @ {bv.ndim}")

    return _emit(_tape_of(a, b), (a, b), value, back)


def transpose(a: Var) -> Var:
    def back(g):
        _acc(a, g.T)

    return _emit(a.tape, (a,), a.value.T, back)


def sigmoid(a: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-a.value))

    def back(g):
        _acc(a, g * s * (1.0 - s))

    return _emit(a.tape, (a,), s, back)


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)

    def back(g):
        _acc(a, g * (1.0 - t * t))

    return _emit(a.tape, (a,), t, back)


def relu(a: Var) -> Var:
    mask = a.value > 0

    def back(g):
        _acc(a, g * mask)

    return _emit(a.tape, (a,), np.maximum(a.value, 0.0), back)


def exp(a: Var, cap: float | None = None) -> Var:
    """Elementwise exp; with cap, inputs are clipped and the clipped
    region gets zero gradient."""
    if cap is None:
        e = np.exp(a.value)

        def back(g):
            _acc(a, g * e)
    else:
        clipped = np.minimum(a.value, cap)
        e = np.exp(clipped)
        active = a.value < cap

        def back(g):
            _acc(a, g * e * active)

    return _emit(a.tape, (a,), e, back)


def absolute(a: Var) -> Var:
    sign = np.sign(a.value)  # subgradient 0 at 0

    def back(g):
        _acc(a, g * sign)

    return _emit(a.tape, (a,), np.abs(a.value), back)


def vsum(a: Var) -> Var:
    def back(g):
        _acc(a, np.broadcast_to(g, a.value.shape))

    return _emit(a.tape, (a,), np.sum(a.value), back)


def take(a: Var, lo: int, hi: int) -> Var:
    """1-D slice [lo:hi] as a tape op."""
    def back(g):
        full = np.zeros_like(a.value)
        full[lo:hi] = g
        _acc(a, full)

    return _emit(a.tape, (a,), a.value[lo:hi], back)


def reshape(a: Var, shape) -> Var:
    orig = a.value.shape

    def back(g):
        _acc(a, g.reshape(orig))

    return _emit(a.tape, (a,), a.value.reshape(shape), back)


def augment_columns(a: Var, extra: np.ndarray) -> Var:
    """Stack a length-n vector as column 0 next to a constant (n, m) block."""
    value = np.concatenate([a.value[:, None], extra], axis=1)

    def back(g):
        _acc(a, g[:, 0])

    return _emit(a.tape, (a,), value, back)


@dataclass
class DenseParams:
    """weights: (out, in); bias: (out,). Fields are tape Vars."""
    weights: Var
    bias: Var


@dataclass
class LstmCellParams:
    """Gate order (i, f, g, o) stacked along the first axis.

    input_weights: (4*hidden, input); recurrent_weights: (4*hidden, hidden);
    biases: (4*hidden,).
    """
    input_weights: Var
    recurrent_weights: Var
    biases: Var

    @property
    def hidden(self) -> int:
        return self.recurrent_weights.value.shape[1]


def lstm_cell_forward(x: Var, h_prev: Var, c_prev: Var,
                      params: LstmCellParams) -> tuple[Var, Var]:
    """One step of a standard LSTM cell (sigmoid gates, tanh candidate)."""
    hidden = params.hidden
    if x.value.shape[0] != params.input_weights.value.shape[1]:
        raise TapeError(
            f"lstm input size {x.value.shape[0]} != "
            f"{params.input_weights.value.shape[1]}")
    pre = add(add(matmul(params.input_weights, x),
                  matmul(params.recurrent_weights, h_prev)),
              params.biases)
    gate_i = sigmoid(take(pre, 0, hidden))
    gate_f = sigmoid(take(pre, hidden, 2 * hidden))
    gate_g = tanh(take(pre, 2 * hidden, 3 * hidden))
    gate_o = sigmoid(take(pre, 3 * hidden, 4 * hidden))
    c = add(mul(gate_f, c_prev), mul(gate_i, gate_g))
    h = mul(gate_o, tanh(c))
    return h, c


def dense_forward(x: Var, params: DenseParams, activation: str = "linear") -> Var:
    """y = Wx + b (vector x) or XW^T + b (row-batched x), then activation."""
    if x.value.ndim == 1:
        pre = add(matmul(params.weights, x), params.bias)
    else:
        pre = add(matmul(x, transpose(params.weights)), params.bias)
    if activation == "linear":
        return pre
    if activation == "relu":
        return relu(pre)
    raise ValueError(f"unknown activation {activation!r}")


class ParameterStore:
    """Named parameter arrays with gradient and NAdam moment slots."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, array) -> None:
        arr = np.array(array, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} contains non-finite values")
        if name in self.values:
            raise ValueError(f"parameter {name!r} already registered")
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.moment1[name] = np.zeros_like(arr)
        self.moment2[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.values)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.values.values())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def leaf(self, tape: Tape, name: str) -> Var:
        """Bind one parameter onto a tape; repeated binds share the Var so
        gradient contributions from weight sharing accumulate."""
        key = (id(self), name)
        cached = tape._leaf_cache.get(key)
        if cached is not None:
            return cached
        var = Var(self.values[name], tape=tape, need=True)
        tape._leaf_cache[key] = var
        tape._leaves.append((self, name, var))
        return var

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, arr in snap.items():
            np.copyto(self.values[name], arr)


def reverse_gradients(tape: Tape, loss: Var) -> None:
    """Run the reverse pass and accumulate into the bound ParameterStores."""
    if tape._consumed:
        raise StaleTapeError("tape already consumed by a reverse pass")
    if loss.value.ndim != 0:
        raise TapeError("loss must be a scalar tape node")
    tape._consumed = True
    loss.grad = np.ones_like(loss.value)
    for out, back in reversed(tape._nodes):
        if out.grad is not None:
            back(out.grad)
    for store, name, var in tape._leaves:
        if var.grad is not None:
            store.grads[name] += var.grad


def nadam_update(store: ParameterStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Nesterov-Adam step; refuses non-finite gradients, then zeros them."""
    bad = [n for n, g in store.grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise GradientError(f"non-finite gradients for {bad}")
    t = store.step + 1
    bias1 = 1.0 - beta1 ** (t + 1)
    bias2 = 1.0 - beta2 ** t
    for name, theta in store.values.items():
        g = store.grads[name]
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = (beta1 * m + (1.0 - beta1) * g) / bias1
        v_hat = v / bias2
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.step = t
    store.zero_grads()


def regularization_penalty(store: ParameterStore, l1: float, l2: float,
                           subset=None) -> float:
    """l1*sum|theta| + l2*sum theta^2 over the filtered names.

    The gradient contribution (l1*sign + 2*l2*theta, subgradient 0 at 0)
    is added to the store's gradients in place.
    """
    if l1 < 0 or l2 < 0:
        raise ValueError("l1 and l2 must be non-negative")
    if subset is None:
        names = store.names()
    elif callable(subset):
        names = [n for n in store.names() if subset(n)]
    else:
        names = [n for n in store.names() if n in set(subset)]
    penalty = 0.0
    for name in names:
        theta = store.values[name]
        if l1:
            penalty += l1 * np.sum(np.abs(theta))
            store.grads[name] += l1 * np.sign(theta)
        if l2:
            penalty += l2 * np.sum(theta * theta)
            store.grads[name] += 2.0 * l2 * theta
    return float(penalty)


def glorot_init(shape, seed: int) -> np.ndarray:
    """Uniform on +/- sqrt(6/(fan_in+fan_out)), deterministic per seed."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"non-positive dimension in {shape}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-limit, limit, size=shape)


def register_lstm(store: ParameterStore, prefix: str, input_size: int,
                  hidden: int, seed: int, zero: bool = False) -> None:
    """Register wx/wh/b arrays for one LSTM cell under a name prefix."""
    if zero:
        store.add(f"{prefix}.wx", np.zeros((4 * hidden, input_size)))
        store.add(f"{prefix}.wh", np.zeros((4 * hidden, hidden)))
    else:
        store.add(f"{prefix}.wx", glorot_init((4 * hidden, input_size), seed))
        store.add(f"{prefix}.wh", glorot_init((4 * hidden, hidden), seed + 1))
    store.add(f"{prefix}.b", np.zeros(4 * hidden))


def bind_lstm(store: ParameterStore, tape: Tape, prefix: str) -> LstmCellParams:
    return LstmCellParams(
        input_weights=store.leaf(tape, f"{prefix}.wx"),
        recurrent_weights=store.leaf(tape, f"{prefix}.wh"),
        biases=store.leaf(tape, f"{prefix}.b"))


def register_dense(store: ParameterStore, prefix: str, input_size: int,
                   output_size: int, seed: int, zero: bool = False) -> None:
    if zero:
        store.add(f"{prefix}.w", np.zeros((output_size, input_size)))
    else:
        store.add(f"{prefix}.w", glorot_init((output_size, input_size), seed))
    store.add(f"{prefix}.b", np.zeros(output_size))


def bind_dense(store: ParameterStore, tape: Tape, prefix: str) -> DenseParams:
    return DenseParams(weights=store.leaf(tape, f"{prefix}.w"),
                       bias=store.leaf(tape, f"{prefix}.b"))


# -- checkpoint format --------------------------------------------------
#
# magic, u32 version, length-prefixed model tag and meta JSON, then a JSON
# array directory of (name, shape, offset) and row-major little-endian f64
# payloads. Round-trips are bit-exact.

_CKPT_MAGIC = b"EPIFORGE-CKPT\n"
_CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(store: ParameterStore, path, model_tag: str,
                    meta: dict | None = None) -> None:
    import json

    directory = []
    offset = 0
    payloads = []
    for name in sorted(store.values):
        arr = np.ascontiguousarray(store.values[name], dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes

    def _block(data: bytes) -> bytes:
        return len(data).to_bytes(4, "little") + data

    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(_CKPT_VERSION.to_bytes(4, "little"))
        fh.write(_block(model_tag.encode("utf-8")))
        fh.write(_block(json.dumps(meta or {}, sort_keys=True).encode("utf-8")))
        fh.write(_block(json.dumps(directory).encode("utf-8")))
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[ParameterStore, str, dict]:
    import json

    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(_CKPT_MAGIC)
    version = int.from_bytes(blob[pos:pos + 4], "little")
    pos += 4
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    def _block():
        nonlocal pos
        n = int.from_bytes(blob[pos:pos + 4], "little")
        pos += 4
        data = blob[pos:pos + n]
        pos += n
        return data

    model_tag = _block().decode("utf-8")
    meta = json.loads(_block().decode("utf-8"))
    directory = json.loads(_block().decode("utf-8"))
    payload_start = pos

    store = ParameterStore()
    for entry in directory:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = payload_start + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=start).reshape(shape)
        store.add(entry["name"], arr)
    return store, model_tag, meta


def finite_difference_check(store: ParameterStore, loss_fn,
                            rel_tol: float = 1e-4,
                            names=None) -> dict[str, float]:
    """Compare analytic gradients to central differences.

    loss_fn(store, tape_or_None) must build the loss on the given tape, or
    just return its value when called with tape=None. Returns the max
    relative error per parameter name; raises AssertionError on failure.
    """
    tape = Tape()
    loss = loss_fn(store, tape)
    store.zero_grads()
    reverse_gradients(tape, loss)
    analytic = {n: store.grads[n].copy() for n in store.names()}
    store.zero_grads()

    check_names = names if names is not None else store.names()
    worst: dict[str, float] = {}
    for name in check_names:
        theta = store.values[name]
        grad = analytic[name]
        flat = theta.reshape(-1)
        gflat = grad.reshape(-1)
        worst_rel = 0.0
        for k in range(flat.size):
            orig = flat[k]
            h = 1e-5 * max(1.0, abs(orig))
            flat[k] = orig + h
            up = float(loss_fn(store, None).value)
            flat[k] = orig - h
            down = float(loss_fn(store, None).value)
            flat[k] = orig
            numeric = (up - down) / (2.0 * h)
            a = gflat[k]
            denom = max(abs(a), abs(numeric), 1.0)
            rel = abs(a - numeric) / denom
            worst_rel = max(worst_rel, rel)
            if rel >= rel_tol:
                raise AssertionError(
                    f"gradient check failed for {name}[{k}]: "
                    f"analytic={a:.8e} numeric={numeric:.8e} rel={rel:.3e}")
        worst[name] = worst_rel
    return worst
