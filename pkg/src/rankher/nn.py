"""Small numpy network engine: dense/conv layers, losses, optimizers, checkpoints.

Arrays are float64 numpy arrays with a leading batch axis. Image tensors use
NCHW layout.
"""

import struct

import numpy as np

DTYPE = np.float64


class ConfigError(ValueError):
    """Raised for shape or configuration mismatches."""


class UsageError(RuntimeError):
    """Raised when an operation is called out of order."""


def conv_output_size(n, f, s):
    if f > n:
        raise ConfigError(f"filter {f} larger than input {n}")
    return (n - f) // s + 1


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Layer:
    kind = "layer"
    tag = 0

    def __init__(self):
        self.params = []
        self.grads = []
        self._cache = None

    def config(self):
        return []

    def output_shape(self, in_shape):
        return in_shape

    def zero_grad(self):
        for g in self.grads:
            g.fill(0.0)

    def bind(self, flat_params, flat_grads):
        """Re-home W/b (and their grads) as views into shared flat buffers."""
        if not self.params:
            return 0
        nw, nb = self.W.size, self.b.size
        flat_params[:nw] = self.W.ravel()
        flat_params[nw:nw + nb] = self.b
        self.W = flat_params[:nw].reshape(self.W.shape)
        self.b = flat_params[nw:nw + nb]
        self.dW = flat_grads[:nw].reshape(self.W.shape)
        self.db = flat_grads[nw:nw + nb]
        self.params, self.grads = [self.W, self.b], [self.dW, self.db]
        return nw + nb


class Dense(Layer):
    kind = "dense"
    tag = 1

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.b = np.zeros(n_out, dtype=DTYPE)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self.params = [self.W, self.b]
        self.grads = [self.dW, self.db]

    def config(self):
        return [self.n_in, self.n_out]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ConfigError(f"dense expects ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x):
        self._cache = x
        return x @ self.W + self.b

    def backward(self, g):
        x = self._cache
        self.dW += x.T @ g
        self.db += g.sum(axis=0)
        return g @ self.W.T


class Conv2D(Layer):
    """Valid (unpadded) 2-d convolution over NCHW input."""

    kind = "conv2d"
    tag = 2

    def __init__(self, in_channels, filters, size, stride=1, rng=None):
        super().__init__()
        self.c, self.k, self.f, self.s = in_channels, filters, size, stride
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = in_channels * size * size, filters * size * size
        self.W = glorot_uniform(rng, (filters, in_channels, size, size), fan_in, fan_out)
        self.b = np.zeros(filters, dtype=DTYPE)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self.params = [self.W, self.b]
        self.grads = [self.dW, self.db]

    def config(self):
        return [self.c, self.k, self.f, self.s]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c:
            raise ConfigError(f"conv2d expects {self.c} channels, got {c}")
        return (self.k, conv_output_size(h, self.f, self.s), conv_output_size(w, self.f, self.s))

    def forward(self, x):
        n, c, h, w = x.shape
        f, s = self.f, self.s
        oh, ow = conv_output_size(h, f, s), conv_output_size(w, f, s)
        win = np.lib.stride_tricks.sliding_window_view(x, (f, f), axis=(2, 3))
        win = win[:, :, ::s, ::s][:, :, :oh, :ow]
        # cols: (n, oh, ow, c*f*f)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * f * f)
        self._cache = (x.shape, cols)
        out = cols @ self.W.reshape(self.k, -1).T + self.b
        return out.transpose(0, 3, 1, 2)

    def backward(self, g):
        (n, c, h, w), cols = self._cache
        f, s = self.f, self.s
        oh, ow = g.shape[2], g.shape[3]
        g2 = g.transpose(0, 2, 3, 1)  # (n, oh, ow, k)
        self.dW += (g2.reshape(-1, self.k).T @ cols.reshape(-1, c * f * f)).reshape(self.W.shape)
        self.db += g2.sum(axis=(0, 1, 2))
        dcols = (g2 @ self.W.reshape(self.k, -1)).reshape(n, oh, ow, c, f, f)
        dx = np.zeros((n, c, h, w), dtype=DTYPE)
        span_h, span_w = s * (oh - 1) + 1, s * (ow - 1) + 1
        for i in range(f):
            for j in range(f):
                dx[:, :, i:i + span_h:s, j:j + span_w:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx


class MaxPool2D(Layer):
    kind = "maxpool2d"
    tag = 3

    def __init__(self, size, stride=None):
        super().__init__()
        self.f = size
        self.s = stride if stride is not None else size

    def config(self):
        return [self.f, self.s]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, conv_output_size(h, self.f, self.s), conv_output_size(w, self.f, self.s))

    def forward(self, x):
        out, argmax = maxpool_forward(x, self.f, self.s)
        self._cache = (x.shape, argmax)
        return out

    def backward(self, g):
        shape, argmax = self._cache
        return maxpool_backward(g, argmax, shape)


def maxpool_forward(x, size, stride):
    """Max over each window; returns (output, flat argmax index into each H*W plane)."""
    n, c, h, w = x.shape
    oh, ow = conv_output_size(h, size, stride), conv_output_size(w, size, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow].reshape(n, c, oh, ow, size * size)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, size)
    rows = np.arange(oh)[:, None] * stride + di
    cols = np.arange(ow)[None, :] * stride + dj
    return out.copy(), rows * w + cols


def maxpool_backward(g, argmax, in_shape):
    n, c, h, w = in_shape
    dx = np.zeros((n * c, h * w), dtype=DTYPE)
    idx = argmax.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), idx.shape[1])
    np.add.at(dx, (rows, idx.ravel()), g.reshape(n * c, -1).ravel())
    return dx.reshape(in_shape)


class ReLU(Layer):
    kind = "relu"
    tag = 4

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, g):
        return g * self._cache


class Tanh(Layer):
    kind = "tanh"
    tag = 5

    def forward(self, x):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, g):
        return g * (1.0 - self._cache ** 2)


class Softmax(Layer):
    """Softmax over the channel axis; averages spatial dims first when present."""

    kind = "softmax"
    tag = 6

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x):
        spatial = x.shape[2:]
        if spatial:
            x = x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)
        p = softmax(x)
        self._cache = (spatial, p)
        return p

    def backward(self, g):
        spatial, p = self._cache
        dz = p * (g - (g * p).sum(axis=1, keepdims=True))
        return logits_to_input_grad(dz, spatial)


class Flatten(Layer):
    kind = "flatten"
    tag = 7

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._cache)


def logits_to_input_grad(dz, spatial):
    """Spread a logit gradient back over the averaged spatial positions."""
    if not spatial:
        return dz
    m = int(np.prod(spatial))
    return np.broadcast_to((dz / m)[:, :, None], (*dz.shape, m)).reshape(*dz.shape, *spatial).copy()


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


LAYER_TYPES = {cls.tag: cls for cls in (Dense, Conv2D, MaxPool2D, ReLU, Tanh, Softmax, Flatten)}


class Network:
    """Ordered stack of layers with cached activations for one backward pass."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({layer.kind}): {exc}") from None
        self.output_shape = shape
        self._ready = False
        self._flatten()

    def _flatten(self):
        n = sum(p.size for layer in self.layers for p in layer.params)
        self.flat_params = np.zeros(n, dtype=DTYPE)
        self.flat_grads = np.zeros(n, dtype=DTYPE)
        pos = 0
        for layer in self.layers:
            size = sum(p.size for p in layer.params)
            layer.bind(self.flat_params[pos:pos + size], self.flat_grads[pos:pos + size])
            pos += size

    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ConfigError(f"layer 0 ({self.layers[0].kind}): expected input {self.input_shape}, "
                              f"got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x)
        self._ready = True
        return x

    __call__ = forward

    def backward(self, grad, skip_softmax=False, accumulate=False):
        """Backpropagate ``grad``; returns the gradient w.r.t. the network input.

        With ``skip_softmax`` the final softmax is bypassed and ``grad`` is taken
        to be the gradient w.r.t. its logits (as returned by the cross-entropy).
        """
        if not self._ready:
            raise UsageError("backward called without a cached forward pass")
        if not accumulate:
            self.zero_grad()
        layers = self.layers
        if skip_softmax and layers and isinstance(layers[-1], Softmax):
            spatial = layers[-1]._cache[0]
            grad = logits_to_input_grad(np.asarray(grad, dtype=DTYPE), spatial)
            layers = layers[:-1]
        for layer in reversed(layers):
            grad = layer.backward(grad)
        self._ready = False
        return grad

    def zero_grad(self):
        self.flat_grads.fill(0.0)

    def copy_from(self, other, tau=1.0):
        if self.flat_params.shape != other.flat_params.shape:
            raise ConfigError("networks have different parameter counts")
        if tau == 1.0:
            self.flat_params[...] = other.flat_params
        else:
            self.flat_params *= 1.0 - tau
            self.flat_params += tau * other.flat_params

    def clone(self):
        net = Network.__new__(Network)
        net.layers = [_clone_layer(layer) for layer in self.layers]
        net.input_shape, net.output_shape = self.input_shape, self.output_shape
        net._ready = False
        net._flatten()
        return net

    def describe(self):
        rows = [f"{'#':>2}  {'kind':<10} {'config':<20} {'params':>8}"]
        for i, layer in enumerate(self.layers):
            n = sum(p.size for p in layer.params)
            rows.append(f"{i:>2}  {layer.kind:<10} {str(layer.config()):<20} {n:>8}")
        return "\n".join(rows)

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def _clone_layer(layer):
    new = layer.__class__.__new__(layer.__class__)
    new.__dict__.update(layer.__dict__)
    new._cache = None
    if layer.params:
        new.W, new.b = layer.W.copy(), layer.b.copy()
        new.dW, new.db = np.zeros_like(new.W), np.zeros_like(new.b)
        new.params, new.grads = [new.W, new.b], [new.dW, new.db]
    return new


def mlp(n_in, hidden, n_out, rng, out_activation=None):
    layers, width = [], n_in
    for h in hidden:
        layers += [Dense(width, h, rng), ReLU()]
        width = h
    layers.append(Dense(width, n_out, rng))
    if out_activation == "tanh":
        layers.append(Tanh())
    elif out_activation == "softmax":
        layers.append(Softmax())
    return Network(layers, (n_in,))


# (kind, filter, count, stride); pooling rows have count None
DESK_PRESET = [("conv", 5, 8, 2), ("pool", 2, None, 2), ("conv", 3, 16, 2),
               ("conv", 3, 32, 1), ("conv", 1, None, 1)]
PAPER_PRESET = [("conv", 20, 24, 2), ("pool", 7, None, 2), ("conv", 15, 48, 2),
                ("pool", 4, None, 2), ("conv", 10, 96, 2), ("conv", 1, None, 1)]
PRESETS = {"desk": (DESK_PRESET, 32), "paper": (PAPER_PRESET, 256)}


def cnn_from_preset(preset="desk", n_classes=5, rng=None, input_size=None, channels=1):
    """Build the ranking / detection CNN: conv+relu stack ending in 1x1 conv + softmax."""
    rows, default_size = PRESETS[preset] if isinstance(preset, str) else (preset, input_size)
    size = input_size or default_size
    rng = rng if rng is not None else np.random.default_rng(0)
    layers, c = [], channels
    for i, (kind, f, count, stride) in enumerate(rows):
        if kind == "pool":
            layers.append(MaxPool2D(f, stride))
            continue
        last = i == len(rows) - 1
        k = n_classes if last else count
        layers.append(Conv2D(c, k, f, stride, rng))
        if not last:
            layers.append(ReLU())
        c = k
    layers.append(Softmax())
    return Network(layers, (channels, size, size))


def loss_mse(pred, target):
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ConfigError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def loss_categorical_crossentropy(probs, labels):
    """Mean cross-entropy of a batch of distributions; gradient is w.r.t. logits."""
    probs = np.atleast_2d(np.asarray(probs, dtype=DTYPE))
    labels = np.atleast_1d(np.asarray(labels))
    n, k = probs.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise ConfigError(f"label out of range [0, {k})")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ConfigError("probabilities do not sum to 1")
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class SGD:
    """Plain gradient descent on a network's flat parameter vector."""

    kind = "sgd"

    def __init__(self, net, lr=1e-3):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.net, self.lr = net, lr

    def step(self):
        if self.lr:
            self.net.flat_params -= self.lr * self.net.flat_grads


class Adam:
    kind = "adam"

    def __init__(self, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.net, self.lr = net, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(net.flat_params)
        self.v = np.zeros_like(net.flat_params)
        self.t = 0

    def step(self):
        if self.lr == 0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        g = self.net.flat_grads
        self.m *= b1
        self.m += (1 - b1) * g
        self.v *= b2
        self.v += (1 - b2) * g * g
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        self.net.flat_params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind, net, lr):
    if kind == "sgd":
        return SGD(net, lr)
    if kind == "adam":
        return Adam(net, lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def optimizer_step(opt, net):
    """Apply one update from the gradients currently stored in ``net``, then clear them."""
    opt.step()
    net.zero_grad()
    return net


def _relu_inputs(net, x):
    """Pre-activation inputs of every ReLU for the given forward pass."""
    out, h = [], np.asarray(x, dtype=DTYPE)
    for layer in net.layers:
        if isinstance(layer, ReLU):
            out.append(h.copy())
        h = layer.forward(h)
    return out


def grad_check(net, x, loss_fn, epsilon=1e-6, skip_softmax=False, kink_tol=None):
    """Max relative error between backprop and central differences over all parameters.

    ``loss_fn(output) -> (loss, grad)``. Parameters whose perturbation moves any
    ReLU input across zero are excluded (the function is not differentiable there).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigError("epsilon must lie in [1e-7, 1e-3]")
    kink_tol = epsilon if kink_tol is None else kink_tol
    out = net.forward(x)
    _, g = loss_fn(out)
    net.backward(g, skip_softmax=skip_softmax)
    analytic = [gr.copy() for gr in net.grads()]
    base_relu = _relu_inputs(net, x)
    worst = 0.0
    for p, ga in zip(net.params(), analytic):
        flat, gflat = p.reshape(-1), ga.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            lp = loss_fn(net.forward(x))[0]
            plus_relu = _relu_inputs(net, x)
            flat[i] = old - epsilon
            lm = loss_fn(net.forward(x))[0]
            minus_relu = _relu_inputs(net, x)
            flat[i] = old
            if _crosses_kink(base_relu, plus_relu, minus_relu, kink_tol):
                continue
            num = (lp - lm) / (2 * epsilon)
            denom = max(abs(gflat[i]), abs(num), 1e-12)
            if abs(gflat[i]) < 1e-10 and abs(num) < 1e-10:
                continue
            worst = max(worst, abs(gflat[i] - num) / denom)
    net.zero_grad()
    return worst


def _crosses_kink(base, plus, minus, tol):
    for b, p, m in zip(base, plus, minus):
        if np.any(np.abs(b) <= tol) or np.any(np.sign(p) != np.sign(m)):
            return True
    return False


MAGIC = b"RKHN1"


def save_checkpoint(net, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        shape = list(net.input_shape)
        fh.write(struct.pack("<I", len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            cfg = layer.config()
            fh.write(struct.pack("<BI", layer.tag, len(cfg)))
            fh.write(struct.pack(f"<{len(cfg)}I", *cfg))
            params = np.concatenate([p.ravel() for p in layer.params]) if layer.params else np.zeros(0)
            fh.write(struct.pack("<Q", params.size))
            fh.write(params.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic")
    pos = 5

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (ndim,) = take("<I")
    input_shape = take(f"<{ndim}I")
    (nlayers,) = take("<I")
    layers = []
    for _ in range(nlayers):
        tag, ncfg = take("<BI")
        cfg = take(f"<{ncfg}I")
        (count,) = take("<Q")
        values = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(DTYPE)
        pos += 8 * count
        cls = LAYER_TYPES.get(tag)
        if cls is None:
            raise ConfigError(f"{path}: unknown layer tag {tag}")
        layer = cls(*cfg) if cfg else cls()
        if layer.params:
            w, b = layer.W, layer.b
            w[...] = values[:w.size].reshape(w.shape)
            b[...] = values[w.size:]
        layers.append(layer)
    return Network(layers, input_shape)
