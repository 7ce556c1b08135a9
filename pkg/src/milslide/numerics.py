"""Dense float32 tensors with reverse-mode autodiff, a small CNN, and Adam.

The tensor graph is built lazily through op functions (conv2d, maxpool2d,
matmul, ...). Each op computes its value eagerly with numpy and records a
closure that scatters the output gradient back to its parents. Inference
uses the *_raw helpers directly so no graph is kept on the hot path; both
paths share the same value computations and are bit-identical.
"""

from dataclasses import dataclass, field
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ConfigError, DataError, NumericError, UsageError

PROB_EPS = 1e-7  # clamp applied to probabilities before log


class Tensor:
    """N-d float array that can participate in the gradient tape.

    invariants: grad, when present, matches data's shape; data is float32
    unless the caller explicitly passes float64 (used by gradient-check
    tests to stay below finite-difference noise).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor."""
        if not self._parents:
            raise UsageError("backward() called on a tensor with no recorded graph")
        if self.data.size != 1:
            raise UsageError("backward() expects a scalar loss")
        topo = []
        visited = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make_node(data, parents, backward_builder):
    """Wrap an op result; the tape is only recorded when a parent needs grads."""
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward_builder(out)
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    data = a.data + b.data

    def bw(out):
        def _run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.data.shape))
        return _run

    return _make_node(data, (a, b), bw)


def scale(x, c):
    """Elementwise multiply by a constant scalar or ndarray (no grad through c)."""
    c = np.asarray(c, dtype=x.data.dtype)
    data = x.data * c

    def bw(out):
        def _run():
            x._accumulate(_unbroadcast(out.grad * c, x.data.shape))
        return _run

    return _make_node(data, (x,), bw)


def rsub_const(c, x):
    """c - x for a constant c."""
    data = np.asarray(c, dtype=x.data.dtype) - x.data

    def bw(out):
        def _run():
            x._accumulate(_unbroadcast(-out.grad, x.data.shape))
        return _run

    return _make_node(data, (x,), bw)


def log(x):
    data = np.log(x.data)

    def bw(out):
        def _run():
            x._accumulate(out.grad / x.data)
        return _run

    return _make_node(data, (x,), bw)


def clamp(x, lo, hi):
    data = np.clip(x.data, lo, hi)
    passthrough = (x.data >= lo) & (x.data <= hi)

    def bw(out):
        def _run():
            x._accumulate(out.grad * passthrough)
        return _run

    return _make_node(data, (x,), bw)


def take_column(x, j):
    """Column j of a 2-d tensor, as a 1-d tensor."""
    data = x.data[:, j].copy()

    def bw(out):
        def _run():
            g = np.zeros_like(x.data)
            g[:, j] = out.grad
            x._accumulate(g)
        return _run

    return _make_node(data, (x,), bw)


def sum_all(x):
    data = x.data.sum(dtype=x.data.dtype)

    def bw(out):
        def _run():
            x._accumulate(np.full_like(x.data, out.grad))
        return _run

    return _make_node(data, (x,), bw)


def mean_all(x):
    n = x.data.size
    data = x.data.mean(dtype=x.data.dtype)

    def bw(out):
        def _run():
            x._accumulate(np.full_like(x.data, out.grad / n))
        return _run

    return _make_node(data, (x,), bw)


def relu(x):
    data = np.maximum(x.data, 0)

    def bw(out):
        def _run():
            x._accumulate(out.grad * (x.data > 0))
        return _run

    return _make_node(data, (x,), bw)


def reshape(x, shape):
    data = x.data.reshape(shape)

    def bw(out):
        def _run():
            x._accumulate(out.grad.reshape(x.data.shape))
        return _run

    return _make_node(data, (x,), bw)


def matmul(a, b):
    data = a.data @ b.data

    def bw(out):
        def _run():
            if a.requires_grad:
                a._accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ out.grad)
        return _run

    return _make_node(data, (a, b), bw)


def softmax_rows(x):
    data = softmax_rows_raw(x.data)

    def bw(out):
        def _run():
            g = out.grad
            inner = (g * data).sum(axis=1, keepdims=True)
            x._accumulate(data * (g - inner))
        return _run

    return _make_node(data, (x,), bw)


def softmax_rows_raw(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def _im2col(x, k, stride):
    """Patches of x as a (N*Ho*Wo, C*k*k) matrix plus the output spatial dims."""
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    if stride > 1:
        windows = windows[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_raw(x, w, b, stride=1):
    """Valid (unpadded) cross-correlation. x: (N,C,H,W), w: (O,C,k,k), b: (O,)."""
    n = x.shape[0]
    o, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride)
    y = cols @ w.reshape(o, -1).T + b
    return y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def conv2d(x, w, b, stride=1):
    n = x.data.shape[0]
    o, c, k, _ = w.data.shape
    cols, ho, wo = _im2col(x.data, k, stride)
    w_mat = w.data.reshape(o, -1)
    y = cols @ w_mat.T + b.data
    data = y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(out):
        def _run():
            dy_mat = out.grad.transpose(0, 2, 3, 1).reshape(-1, o)
            if w.requires_grad:
                w._accumulate((dy_mat.T @ cols).reshape(w.data.shape))
            if b.requires_grad:
                b._accumulate(dy_mat.sum(axis=0))
            if x.requires_grad:
                dcols = (dy_mat @ w_mat).reshape(n, ho, wo, c, k, k)
                dx = np.zeros_like(x.data)
                for i in range(k):
                    rows = slice(i, i + (ho - 1) * stride + 1, stride)
                    for j in range(k):
                        cols_sl = slice(j, j + (wo - 1) * stride + 1, stride)
                        dx[:, :, rows, cols_sl] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                x._accumulate(dx)
        return _run

    return _make_node(data, (x, w, b), bw)


def _pool_prepare(x, window):
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    xc = x[:, :, :ho * window, :wo * window]
    flat = (xc.reshape(n, c, ho, window, wo, window)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, ho, wo, window * window))
    return flat, ho, wo


def maxpool2d_raw(x, window):
    """Non-overlapping max pool; trailing rows/cols that do not fill a window are dropped."""
    if window == 1:
        return x
    flat, _, _ = _pool_prepare(x, window)
    return flat.max(axis=-1)


def maxpool2d(x, window):
    if window == 1:
        return x
    flat, ho, wo = _pool_prepare(x.data, window)
    data = flat.max(axis=-1)
    idx = flat.argmax(axis=-1)  # first max wins on ties

    def bw(out):
        def _run():
            n, c, h, w = x.data.shape
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], out.grad[..., None], axis=-1)
            dxc = (dflat.reshape(n, c, ho, wo, window, window)
                        .transpose(0, 1, 2, 4, 3, 5)
                        .reshape(n, c, ho * window, wo * window))
            dx = np.zeros_like(x.data)
            dx[:, :, :ho * window, :wo * window] = dxc
            x._accumulate(dx)
        return _run

    return _make_node(data, (x,), bw)


# ---------------------------------------------------------------------------
# loss


def weighted_cross_entropy(probs, targets, w0, w1):
    """Class-weighted cross entropy on positive-class probabilities.

    Per example: -w1*y*log(p) - w0*(1-y)*log(1-p) with p the predicted
    probability of the positive class, clamped to [PROB_EPS, 1-PROB_EPS];
    the batch loss is the plain mean of the per-example values.
    """
    if w0 <= 0 or w1 <= 0:
        raise ArgumentError("class weights must be positive")
    if not isinstance(probs, Tensor):
        probs = Tensor(probs)
    y = np.asarray(targets)
    if y.size == 0:
        raise ArgumentError("weighted_cross_entropy needs a non-empty batch")
    if probs.data.ndim != 2 or probs.data.shape[0] != y.size or probs.data.shape[1] != 2:
        raise UsageError("probs must be (N, 2) aligned with targets")
    yf = y.astype(probs.data.dtype)
    p1 = take_column(probs, 1)
    log_p = log(clamp(p1, PROB_EPS, 1.0 - PROB_EPS))
    log_q = log(clamp(rsub_const(1.0, p1), PROB_EPS, 1.0 - PROB_EPS))
    per_example = add(scale(log_p, -w1 * yf), scale(log_q, -w0 * (1.0 - yf)))
    return mean_all(per_example)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the tile classifier: conv stack, one hidden layer, 2-way head."""

    input_side: int = 32
    channels: int = 3
    conv_layers: tuple = ((8, 3, 1), (16, 3, 1))  # (out_channels, kernel, stride)
    pool: tuple = (2, 2)                          # max-pool window after each conv
    hidden_units: int = 64
    outputs: int = 2

    def validate(self):
        if self.outputs != 2:
            raise ConfigError("the classifier head is two-class only")
        if len(self.pool) != len(self.conv_layers):
            raise ConfigError("pool must list one window per conv layer")
        if self.input_side < 1 or self.channels < 1 or self.hidden_units < 1:
            raise ConfigError("sizes must be positive")
        self.flat_features()  # raises if the spatial size collapses
        return self

    def spatial_sizes(self):
        """Spatial side after each conv+pool stage."""
        side = self.input_side
        sides = []
        for (out_ch, k, stride), window in zip(self.conv_layers, self.pool):
            if out_ch < 1 or k < 1 or stride < 1 or window < 1:
                raise ConfigError("conv/pool parameters must be positive")
            if k > side:
                raise ConfigError(f"kernel {k} exceeds spatial side {side}")
            side = (side - k) // stride + 1
            side //= window
            if side < 1:
                raise ConfigError("architecture collapses the spatial size to zero")
            sides.append(side)
        return sides

    def flat_features(self):
        sides = self.spatial_sizes()
        channels = self.conv_layers[-1][0] if self.conv_layers else self.channels
        side = sides[-1] if sides else self.input_side
        return channels * side * side

    def to_lines(self):
        conv = ",".join(f"{o}:{k}:{s}" for o, k, s in self.conv_layers)
        pool = ",".join(str(p) for p in self.pool)
        return [
            f"input_side={self.input_side}",
            f"channels={self.channels}",
            f"conv_layers={conv}",
            f"pool={pool}",
            f"hidden_units={self.hidden_units}",
            f"outputs={self.outputs}",
        ]

    @classmethod
    def from_lines(cls, lines):
        kv = {}
        for ln in lines:
            ln = ln.strip()
            if not ln:
                continue
            if "=" not in ln:
                raise DataError(f"bad architecture line: {ln!r}")
            k, v = ln.split("=", 1)
            kv[k] = v
        try:
            conv = tuple(
                tuple(int(p) for p in item.split(":"))
                for item in kv["conv_layers"].split(",") if item
            )
            pool = tuple(int(p) for p in kv["pool"].split(",") if p)
            cfg = cls(
                input_side=int(kv["input_side"]),
                channels=int(kv["channels"]),
                conv_layers=conv,
                pool=pool,
                hidden_units=int(kv["hidden_units"]),
                outputs=int(kv["outputs"]),
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"unparseable architecture config: {exc}") from exc
        if any(len(c) != 3 for c in cfg.conv_layers):
            raise DataError("conv_layers entries must be out:kernel:stride")
        return cfg.validate()


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class TileCnn:
    """Small CNN mapping (N, 3, S, S) tile batches to two-class probabilities."""

    def __init__(self, config, params):
        self.config = config
        self.params = params  # name -> Tensor, in fixed construction order

    @classmethod
    def initialize(cls, config, seed, dtype=np.float32):
        """He-uniform fan-in weights, zero biases, fully determined by seed."""
        config.validate()
        rng = np.random.default_rng(seed)
        params = {}
        in_ch = config.channels
        for i, (out_ch, k, _) in enumerate(config.conv_layers):
            fan_in = in_ch * k * k
            params[f"conv{i}.w"] = Tensor(_he_uniform(rng, (out_ch, in_ch, k, k), fan_in, dtype),
                                          requires_grad=True)
            params[f"conv{i}.b"] = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
            in_ch = out_ch
        flat = config.flat_features()
        params["fc.w"] = Tensor(_he_uniform(rng, (flat, config.hidden_units), flat, dtype),
                                requires_grad=True)
        params["fc.b"] = Tensor(np.zeros(config.hidden_units, dtype=dtype), requires_grad=True)
        params["head.w"] = Tensor(_he_uniform(rng, (config.hidden_units, config.outputs),
                                              config.hidden_units, dtype),
                                  requires_grad=True)
        params["head.b"] = Tensor(np.zeros(config.outputs, dtype=dtype), requires_grad=True)
        return cls(config, params)

    def _check_batch(self, x):
        c, s = self.config.channels, self.config.input_side
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ConfigError(f"batch shape {x.shape} does not match model input ({c},{s},{s})")

    def features_raw(self, x):
        """Hidden-layer activations (the embedding fed to the head), no tape."""
        self._check_batch(x)
        h = x
        for i, (out_ch, k, stride) in enumerate(self.config.conv_layers):
            h = conv2d_raw(h, self.params[f"conv{i}.w"].data,
                           self.params[f"conv{i}.b"].data, stride)
            h = np.maximum(h, 0)
            h = maxpool2d_raw(h, self.config.pool[i])
        h = h.reshape(h.shape[0], -1)
        h = h @ self.params["fc.w"].data + self.params["fc.b"].data
        return np.maximum(h, 0)

    def forward(self, x):
        """Class probabilities for a batch, no graph recorded."""
        feats = self.features_raw(x)
        logits = feats @ self.params["head.w"].data + self.params["head.b"].data
        probs = softmax_rows_raw(logits)
        if not np.isfinite(probs).all():
            raise NumericError("non-finite activation in forward pass")
        return probs

    def forward_train(self, x):
        """Class probabilities with the computation graph recorded."""
        self._check_batch(x)
        h = Tensor(x)
        for i, (out_ch, k, stride) in enumerate(self.config.conv_layers):
            h = conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride)
            h = relu(h)
            h = maxpool2d(h, self.config.pool[i])
        h = reshape(h, (x.shape[0], -1))
        h = relu(add(matmul(h, self.params["fc.w"]), self.params["fc.b"]))
        logits = add(matmul(h, self.params["head.w"]), self.params["head.b"])
        probs = softmax_rows(logits)
        if not np.isfinite(probs.data).all():
            raise NumericError("non-finite activation in forward pass")
        return probs

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_copy(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state):
        for name, p in self.params.items():
            if name not in state or state[name].shape != p.data.shape:
                raise UsageError(f"state entry {name!r} missing or mis-shaped")
            p.data = state[name].astype(p.data.dtype, copy=True)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state

    def copy(self):
        dup = AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                        eps=self.eps, step=self.step)
        dup.m = {k: a.copy() for k, a in self.m.items()}
        dup.v = {k: a.copy() for k, a in self.v.items()}
        return dup


def adam_step(params, state):
    """One bias-corrected Adam update in place; gradients are left untouched."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise UsageError(f"parameter {name!r} has no gradient")
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise UsageError(f"shape mismatch for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint format: "MILC", version, architecture text, parameters, optimizer


CHECKPOINT_MAGIC = b"MILC"
CHECKPOINT_VERSION = 1


def _write_entry(out, name, array):
    raw = name.encode("utf-8")
    out.append(struct.pack("<I", len(raw)))
    out.append(raw)
    arr = np.asarray(array, dtype="<f4")  # not ascontiguousarray: that would force 0-d scalars to rank 1
    out.append(struct.pack("<Q", arr.ndim))
    for d in arr.shape:
        out.append(struct.pack("<Q", d))
    out.append(arr.tobytes())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise DataError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def entry(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u64()
        dims = tuple(self.u64() for _ in range(rank))
        count = 1
        for d in dims:
            count *= d
        data = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims)
        return name, data


def save_checkpoint(path, model, adam=None):
    """Serialize architecture, parameters, and optimizer state; round-trip is bit-exact."""
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    config_blob = "\n".join(model.config.to_lines()).encode("utf-8")
    out.append(struct.pack("<I", len(config_blob)))
    out.append(config_blob)
    out.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        _write_entry(out, name, p.data)
    if adam is None:
        out.append(struct.pack("<I", 0))
    else:
        entries = [("lr", adam.lr), ("beta1", adam.beta1), ("beta2", adam.beta2),
                   ("eps", adam.eps), ("step", float(adam.step))]
        out.append(struct.pack("<I", len(entries) + 2 * len(adam.m)))
        for name, value in entries:
            _write_entry(out, name, np.float32(value))
        for name, arr in adam.m.items():
            _write_entry(out, f"m.{name}", arr)
        for name, arr in adam.v.items():
            _write_entry(out, f"v.{name}", arr)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (model, adam_or_none)."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_lines(reader.take(reader.u32()).decode("utf-8").split("\n"))
    model = TileCnn.initialize(config, seed=0)
    stored = dict(reader.entry() for _ in range(reader.u32()))
    if set(stored) != set(model.params):
        raise DataError("checkpoint parameters do not match the declared architecture")
    for name, p in model.params.items():
        if stored[name].shape != p.data.shape:
            raise DataError(f"checkpoint parameter {name!r} has wrong shape")
        p.data = stored[name].copy()
    n_state = reader.u32()
    if n_state == 0:
        return model, None
    entries = dict(reader.entry() for _ in range(n_state))
    try:
        adam = AdamState(lr=float(entries.pop("lr")),
                         beta1=float(entries.pop("beta1")),
                         beta2=float(entries.pop("beta2")),
                         eps=float(entries.pop("eps")),
                         step=int(round(float(entries.pop("step")))))
        for name in model.params:
            adam.m[name] = entries.pop(f"m.{name}").copy()
            adam.v[name] = entries.pop(f"v.{name}").copy()
    except KeyError as exc:
        raise DataError(f"checkpoint optimizer state incomplete: {exc}") from exc
    if entries:
        raise DataError(f"checkpoint has unexpected optimizer entries: {sorted(entries)}")
    return model, adam
