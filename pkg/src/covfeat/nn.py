"""Small convolutional regressor with hand-wired backpropagation.

The topology is fixed: five valid convolutions with 2x2 max pooling after
the first two, ReLU after every convolution but the last.  Applied to a
32x32 patch the network emits a single (dx, dy) prediction; applied to a
larger image it produces the same prediction on a stride-4 grid.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# (kernel, out_channels) per layer; input is one grayscale channel.
LAYER_SPEC = ((5, 32), (5, 128), (3, 128), (3, 256), (1, 2))
POOL_AFTER = (0, 1)
PATCH_SIZE = 32
STRIDE = 4
# the last layer regresses in half-patch units; PIXELS_PER_UNIT converts to pixels
PIXELS_PER_UNIT = 16.0
INIT_GAIN = 1.0
# extra factor on the regression layer: small initial offsets train much faster
OUTPUT_GAIN = 0.1

CHECKPOINT_MAGIC = b"COVFEAT\x00"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


class ContractError(RuntimeError):
    """Raised when methods are called out of order (e.g. backward first)."""


class Tensor:
    """Dense array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.ascontiguousarray(data)
        if grad is not None and np.shape(grad) != self.data.shape:
            raise ShapeError(f"grad shape {np.shape(grad)} != data shape {self.data.shape}")
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _conv_nhwc(x, weight, bias, relu):
    n, h, w, c = x.shape
    o, _, k, _ = weight.shape
    ho, wo = h - k + 1, w - k + 1
    if k == 1:
        cols = x.reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(x, (k, k), axis=(1, 2))  # N, Ho, Wo, C, k, k
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = weight.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = cols @ wmat
    out += bias
    if relu:
        np.maximum(out, 0, out=out)
    return out.reshape(n, ho, wo, o), cols


def _conv_backward_nhwc(dout, cols, x_shape, weight, need_input_grad=True):
    n, h, w, c = x_shape
    o, _, k, _ = weight.shape
    ho, wo = h - k + 1, w - k + 1
    dmat = dout.reshape(n * ho * wo, o)
    wmat = weight.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    dw = (cols.T @ dmat).reshape(k, k, c, o).transpose(3, 2, 0, 1)
    db = dmat.sum(axis=0)
    if not need_input_grad:
        return None, np.ascontiguousarray(dw), db
    dcols = (dmat @ wmat.T).reshape(n, ho, wo, k, k, c)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    return dx, np.ascontiguousarray(dw), db


def _check_conv_shapes(x_shape, weight, name):
    if len(x_shape) != 4:
        raise ShapeError(f"{name}: expected (N, C, H, W) input, got shape {tuple(x_shape)}")
    _, c, h, w = x_shape
    _, ci, k, _ = weight.shape
    if c != ci:
        raise ShapeError(f"{name}: input has {c} channels, layer expects {ci}")
    if h < k or w < k:
        raise ShapeError(f"{name}: spatial extent {h}x{w} smaller than kernel {k}x{k}")


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, relu: bool = False,
                 name: str = "conv") -> np.ndarray:
    """Valid cross-correlation plus bias (and optional ReLU) of a (N, C, H, W) batch."""
    x = np.asarray(x)
    _check_conv_shapes(x.shape, weight, name)
    out, _ = _conv_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), weight, bias, relu)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Gradients ``(dx, dw, db)`` of a linear valid convolution, NCHW layout.

    ``dout`` must already include the ReLU mask if the layer has one.
    """
    xh = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))
    _, cols = _conv_nhwc(xh, weight, np.zeros(weight.shape[0], weight.dtype), False)
    dx, dw, db = _conv_backward_nhwc(np.ascontiguousarray(dout.transpose(0, 2, 3, 1)), cols,
                                     xh.shape, weight)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw, db


def _pool_nhwc(x):
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool: spatial extent {h}x{w} too small for a 2x2 window")
    q = [x[:, di:2 * ho:2, dj:2 * wo:2, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    # row-major window index of the first maximum
    idx = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        idx[q[k] == out] = k
    return out, idx


def _pool_backward_nhwc(dout, idx, x_shape):
    n, h, w, c = x_shape
    ho, wo = idx.shape[1], idx.shape[2]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, di:2 * ho:2, dj:2 * wo:2, :] = np.where(idx == k, dout, 0)
    return dx


def maxpool_forward(x: np.ndarray):
    """Non-overlapping 2x2 max pooling of (N, C, H, W), floor on odd extents.

    Returns the pooled array and the in-window argmax (0..3, row-major,
    first index wins ties) used to route gradients back.
    """
    out, idx = _pool_nhwc(np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1)))
    return out.transpose(0, 3, 1, 2), idx.transpose(0, 3, 1, 2)


def maxpool_backward(dout: np.ndarray, idx: np.ndarray, x_shape):
    n, c, h, w = x_shape
    dx = _pool_backward_nhwc(dout.transpose(0, 2, 3, 1), idx.transpose(0, 2, 3, 1), (n, h, w, c))
    return dx.transpose(0, 3, 1, 2)


@dataclass
class ConvLayer:
    kernel_size: int
    in_channels: int
    out_channels: int
    weight: Tensor
    bias: Tensor
    has_relu: bool = True

    @classmethod
    def init(cls, k, cin, cout, relu, rng, dtype=np.float32, gain=1.0):
        # He-style uniform fan-in scaling
        bound = gain * np.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        return cls(k, cin, cout, Tensor(w), Tensor(np.zeros(cout, dtype=dtype)), relu)


@dataclass
class _Cache:
    x_shapes: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    relu_masks: list = field(default_factory=list)
    pool_shapes: dict = field(default_factory=dict)
    pool_idx: dict = field(default_factory=dict)


class Network:
    """The five-layer fully convolutional regressor.

    ``forward`` accepts ``(N, 1, H, W)`` (or ``(1, H, W)`` / ``(H, W)``) and
    returns raw ``(N, 2, Gh, Gw)`` outputs in half-patch units; for 32x32
    input the grid is 1x1.  ``predict`` converts to pixels.
    """

    def __init__(self, layers: list[ConvLayer], pool_after=POOL_AFTER):
        self.layers = layers
        self.pool_after = tuple(pool_after)
        self._cache: _Cache | None = None

    @classmethod
    def create(cls, seed: int = 0, dtype=np.float32, spec=LAYER_SPEC, pool_after=POOL_AFTER,
               gain: float = INIT_GAIN, output_gain: float = OUTPUT_GAIN):
        """Seeded He-uniform init scaled by ``gain``; the last layer also by ``output_gain``.

        Plain SGD at lr 0.1 diverges from this init; train with per-layer
        multipliers (``lr_multipliers``) to keep the nominal lr.
        """
        rng = np.random.default_rng(seed)
        layers = []
        cin = 1
        for i, (k, cout) in enumerate(spec):
            relu = i < len(spec) - 1
            g = gain if relu else gain * output_gain
            layers.append(ConvLayer.init(k, cin, cout, relu, rng, dtype, g))
            cin = cout
        return cls(layers, pool_after)

    @property
    def dtype(self):
        return self.layers[0].weight.data.dtype

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def astype(self, dtype) -> "Network":
        layers = [ConvLayer(l.kernel_size, l.in_channels, l.out_channels,
                            Tensor(l.weight.data.astype(dtype)), Tensor(l.bias.data.astype(dtype)),
                            l.has_relu) for l in self.layers]
        return Network(layers, self.pool_after)

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def zero(self) -> "Network":
        for p in self.params():
            p.data[...] = 0
        return self

    @staticmethod
    def _as_batch(x):
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[None]
        return x

    def lr_multipliers(self, scale: float) -> list[float]:
        """Per-tensor step factors ``scale / fan_in`` (weight and bias of a layer share one).

        With plain SGD this is the same as training weights stored in
        units of ``sqrt(scale / fan_in)``: every layer then sees a step
        size matched to its fan-in instead of one global value.
        """
        out = []
        for layer in self.layers:
            m = scale / (layer.in_channels * layer.kernel_size ** 2)
            out += [m, m]
        return out

    def output_grid_shape(self, h: int, w: int) -> tuple[int, int]:
        for i, layer in enumerate(self.layers):
            h, w = h - layer.kernel_size + 1, w - layer.kernel_size + 1
            if i in self.pool_after:
                h, w = h // 2, w // 2
        return h, w

    def forward(self, x, train: bool = False) -> np.ndarray:
        """Run the network; with ``train=True`` activations are cached."""
        x = self._as_batch(x).astype(self.dtype, copy=False)
        _check_conv_shapes(x.shape, self.layers[0].weight.data, "layer 1")
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        cache = _Cache() if train else None
        for i, layer in enumerate(self.layers):
            k = layer.kernel_size
            if x.shape[1] < k or x.shape[2] < k:
                raise ShapeError(f"layer {i + 1}: spatial extent {x.shape[1]}x{x.shape[2]} "
                                 f"smaller than kernel {k}x{k}")
            if cache is not None:
                cache.x_shapes.append(x.shape)
            x, cols = _conv_nhwc(x, layer.weight.data, layer.bias.data, layer.has_relu)
            if cache is not None:
                cache.cols.append(cols)
                cache.relu_masks.append(x > 0 if layer.has_relu else None)
            if i in self.pool_after:
                if cache is not None:
                    cache.pool_shapes[i] = x.shape
                x, idx = _pool_nhwc(x)
                if cache is not None:
                    cache.pool_idx[i] = idx
        self._cache = cache
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def predict(self, patches) -> np.ndarray:
        """(N, 32, 32) or (N, 1, 32, 32) patches -> (N, 2) translations in pixels."""
        x = np.asarray(patches)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        if x.shape[-2:] != (PATCH_SIZE, PATCH_SIZE):
            raise ShapeError(f"expected {PATCH_SIZE}x{PATCH_SIZE} patches, got {x.shape[-2:]}")
        return self.forward(x)[:, :, 0, 0].astype(np.float64) * PIXELS_PER_UNIT

    def backward(self, dout: np.ndarray, need_input_grad: bool = False):
        """Accumulate parameter gradients from d(loss)/d(output).

        ``dout`` has the shape of the last forward output ((N, 2) is
        accepted for patch batches).  Gradients are written into each
        parameter's ``grad`` (overwriting).  Returns d(loss)/d(input) when
        requested.
        """
        cache = self._cache
        if cache is None:
            raise ContractError("backward called without a preceding forward(train=True)")
        dout = np.asarray(dout, dtype=self.dtype)
        if dout.ndim == 2:
            dout = dout[:, :, None, None]
        d = np.ascontiguousarray(dout.transpose(0, 2, 3, 1))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i in self.pool_after:
                d = _pool_backward_nhwc(d, cache.pool_idx[i], cache.pool_shapes[i])
            if layer.has_relu:
                d = d * cache.relu_masks[i]
            want_dx = i > 0 or need_input_grad
            d, dw, db = _conv_backward_nhwc(d, cache.cols[i], cache.x_shapes[i],
                                            layer.weight.data, need_input_grad=want_dx)
            layer.weight.grad = dw
            layer.bias.grad = db
        if d is not None:
            d = d.transpose(0, 3, 1, 2)
        self._cache = None
        return d

    # -- serialization -------------------------------------------------

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params()]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.state_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


@dataclass
class SGD:
    """Classical momentum SGD: v <- mu*v - lr*g; p <- p + v.

    The learning rate is ``base_lr * decay**epoch``; ``decay_lr`` advances
    the epoch counter.  ``multipliers`` optionally scales the step of each
    parameter (one factor per tensor, in ``Network.params()`` order).
    """

    base_lr: float = 0.1
    momentum: float = 0.9
    decay: float = 0.96
    epoch: int = 0
    velocity: list | None = None
    multipliers: list | None = None

    @property
    def lr(self) -> float:
        return self.base_lr * self.decay ** self.epoch

    def step(self, params: list[Tensor]):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p.data) for p in params]
        mult = self.multipliers or [1.0] * len(params)
        if len(mult) != len(params):
            raise ContractError(f"{len(mult)} lr multipliers for {len(params)} parameters")
        for p, v, m in zip(params, self.velocity, mult):
            if p.grad is None:
                continue
            v *= self.momentum
            v -= (self.lr * m) * p.grad
            p.data += v

    def decay_lr(self):
        self.epoch += 1


# -- checkpoint file -----------------------------------------------------
#
# Layout (little endian):
#   8 bytes  magic "COVFEAT\0"
#   u32      format version
#   u32      header length L
#   L bytes  UTF-8 JSON header: {"layers": [...], "pool_after": [...],
#            "dtype": "float32", "optimizer": {...}, "meta": {...},
#            "arrays": [{"name", "shape"}, ...]}
#   arrays   raw row-major values in header order: layer weights/biases,
#            then optimizer velocities (if present)


def save_checkpoint(path, net: Network, opt: SGD | None = None, meta: dict | None = None):
    arrays = []
    names = []
    for i, layer in enumerate(net.layers):
        arrays += [layer.weight.data, layer.bias.data]
        names += [f"layer{i + 1}.weight", f"layer{i + 1}.bias"]
    opt_state = None
    if opt is not None:
        opt_state = {"base_lr": opt.base_lr, "momentum": opt.momentum, "decay": opt.decay,
                     "epoch": opt.epoch, "has_velocity": opt.velocity is not None,
                     "multipliers": opt.multipliers}
        if opt.velocity is not None:
            arrays += list(opt.velocity)
            names += [f"velocity{j}" for j in range(len(opt.velocity))]
    header = {
        "layers": [[l.kernel_size, l.in_channels, l.out_channels, l.has_relu] for l in net.layers],
        "pool_after": list(net.pool_after),
        "dtype": np.dtype(net.dtype).name,
        "optimizer": opt_state,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    dt = np.dtype(net.dtype).newbyteorder("<")
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype=dt).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(network, optimizer or None, meta dict)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(raw[16:16 + hlen])
    dt = np.dtype(header["dtype"]).newbyteorder("<")
    offset = 16 + hlen
    arrays = []
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        a = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays.append(a.astype(header["dtype"]))
        offset += count * dt.itemsize
    if offset != len(raw):
        raise ValueError(f"{path}: truncated or oversized checkpoint")
    layers = []
    for i, (k, cin, cout, relu) in enumerate(header["layers"]):
        layers.append(ConvLayer(k, cin, cout, Tensor(arrays[2 * i]), Tensor(arrays[2 * i + 1]), relu))
    net = Network(layers, header["pool_after"])
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        vel = arrays[2 * len(layers):] if o["has_velocity"] else None
        opt = SGD(base_lr=o["base_lr"], momentum=o["momentum"], decay=o["decay"], epoch=o["epoch"],
                  velocity=vel, multipliers=o.get("multipliers"))
    return net, opt, header["meta"]
