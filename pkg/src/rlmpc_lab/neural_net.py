"""Dense feedforward networks with manual backpropagation.

One implementation serves the MPC surrogate, the policy network, and the
value network: float64 weights, relu/tanh/linear activations, and an output
scale applied after the final activation so tanh outputs saturate exactly at
the actuator bound. Inputs may be single vectors (n,) or batches (m, n); all
functions follow the input's convention."""

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


class DimensionMismatch(ValueError):
    pass


class StaleCache(ValueError):
    """Cache handed to backward does not belong to this network."""


class EmptyDataset(ValueError):
    pass


@dataclass
class Layer:
    W: np.ndarray          # (out, in)
    b: np.ndarray          # (out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")


@dataclass
class Mlp:
    layers: list
    output_scale: float = 1.0

    def __post_init__(self):
        if not self.output_scale > 0:
            raise ValueError(f"output_scale must be positive, got {self.output_scale}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.W.shape[1] != prev.W.shape[0]:
                raise DimensionMismatch(
                    f"layer dims do not chain: {prev.W.shape} -> {nxt.W.shape}")

    @property
    def n_inputs(self):
        return self.layers[0].W.shape[1]

    @property
    def n_outputs(self):
        return self.layers[-1].W.shape[0]

    def copy(self):
        return Mlp([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers],
                   self.output_scale)

    def _signature(self):
        return tuple((l.W.shape, l.activation) for l in self.layers)


@dataclass
class Gradients:
    layers: list               # (dW, db) per layer, mirroring the network
    input_gradient: np.ndarray


def init_mlp(sizes, activations, output_scale=1.0, seed=0) -> Mlp:
    """He-uniform initialization for relu layers, Xavier-uniform otherwise.

    ``sizes`` chains input through hidden to output width, e.g. (10, 128, 1);
    ``activations`` has one entry per weight layer."""
    if len(activations) != len(sizes) - 1:
        raise DimensionMismatch(f"need {len(sizes) - 1} activations, got {len(activations)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(W=W, b=np.zeros(fan_out), activation=act))
    return Mlp(layers=layers, output_scale=output_scale)


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z, kind):
    if kind == "relu":
        return (z > 0.0).astype(float)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def forward(net: Mlp, x):
    """Evaluate the network; returns (output, cache) with the cache retaining
    layer inputs and pre-activations for :func:`backward`."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.n_inputs:
        raise DimensionMismatch(f"input width {h.shape[1]} != {net.n_inputs}")
    inputs = []
    pre = []
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.W.T + layer.b
        pre.append(z)
        h = _act(z, layer.activation)
    y = net.output_scale * h
    cache = (net._signature(), single, inputs, pre)
    return (y[0] if single else y), cache


def predict(net: Mlp, x):
    """Forward pass without building a cache; the hot path for controllers."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    for layer in net.layers:
        h = _act(h @ layer.W.T + layer.b, layer.activation)
    y = net.output_scale * h
    return y[0] if single else y


def backward(net: Mlp, cache, upstream) -> Gradients:
    """Exact gradients of sum(upstream * output) w.r.t. parameters and input.

    ``upstream`` must match the forward call's output shape. For a batch the
    per-sample contributions are summed into the parameter gradients while the
    input gradient stays per-sample."""
    signature, single, inputs, pre = cache
    if signature != net._signature():
        raise StaleCache("cache does not match this network's layout")
    g = np.asarray(upstream, dtype=float)
    if single:
        g = g[None, :]
    if g.shape != (inputs[0].shape[0], net.n_outputs):
        raise DimensionMismatch(f"upstream shape {g.shape} does not match output")
    g = g * net.output_scale
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * _act_grad(pre[i], layer.activation)
        dW = dz.T @ inputs[i]
        db = dz.sum(axis=0)
        grads[i] = (dW, db)
        g = dz @ layer.W
    input_gradient = g[0] if single else g
    return Gradients(layers=grads, input_gradient=input_gradient)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, lr: float, **kw):
        state = cls(lr=lr, **kw)
        for layer in net.layers:
            state.m.append((np.zeros_like(layer.W), np.zeros_like(layer.b)))
            state.v.append((np.zeros_like(layer.W), np.zeros_like(layer.b)))
        return state


def adam_step(net: Mlp, grads: Gradients, state: AdamState) -> Mlp:
    """One Adam update in place; returns the network for chaining."""
    if len(grads.layers) != len(net.layers):
        raise DimensionMismatch("gradient layout does not match the network")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for layer, (dW, db), m, v in zip(net.layers, grads.layers, state.m, state.v):
        for param, grad, mom, sec in ((layer.W, dW, m[0], v[0]),
                                      (layer.b, db, m[1], v[1])):
            mom *= state.beta1
            mom += (1.0 - state.beta1) * grad
            sec *= state.beta2
            sec += (1.0 - state.beta2) * grad * grad
            param -= state.lr * (mom / c1) / (np.sqrt(sec / c2) + state.eps)
    return net


def train_supervised(net: Mlp, dataset, epochs, batch_size, lr, seed=0):
    """Minimize mean-squared error over shuffled minibatches.

    ``dataset`` is an (inputs, targets) array pair. Returns the trained
    network and the per-epoch mean training loss."""
    X, Y = dataset
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) == 0:
        raise EmptyDataset("training set is empty")
    if len(X) != len(Y):
        raise DimensionMismatch(f"{len(X)} inputs vs {len(Y)} targets")
    rng = np.random.default_rng(seed)
    state = AdamState.for_net(net, lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            y, cache = forward(net, X[idx])
            err = y - Y[idx]
            losses.append(float(np.mean(err**2)))
            upstream = 2.0 * err / err.size
            adam_step(net, backward(net, cache, upstream), state)
        history.append(float(np.mean(losses)))
    return net, history


def mse(net: Mlp, X, Y):
    y = predict(net, np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    return float(np.mean((y - Y) ** 2))


def save_mlp(net: Mlp, path):
    """Text format: ``mlp v1 <dims> <activations> <output_scale>`` then
    row-major weights and the bias line per layer."""
    dims = [net.n_inputs] + [l.W.shape[0] for l in net.layers]
    acts = [l.activation for l in net.layers]
    with open(path, "w") as fh:
        fh.write("mlp v1 " + " ".join(str(d) for d in dims) + " "
                 + " ".join(acts) + f" {float(net.output_scale)!r}\n")
        for layer in net.layers:
            for row in layer.W:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            fh.write(" ".join(repr(float(v)) for v in layer.b) + "\n")


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["mlp", "v1"]:
            raise ValueError(f"{path}: not an mlp v1 weight file")
        rest = header[2:]
        dims = []
        for tok in rest:
            try:
                dims.append(int(tok))
            except ValueError:
                break
        n_layers = len(dims) - 1
        if n_layers < 1 or len(rest) != len(dims) + n_layers + 1:
            raise ValueError(f"{path}: malformed mlp header")
        acts = rest[len(dims):len(dims) + n_layers]
        output_scale = float(rest[-1])
        layers = []
        for fan_in, fan_out, act in zip(dims, dims[1:], acts):
            W = np.empty((fan_out, fan_in))
            for i in range(fan_out):
                row = fh.readline().split()
                if len(row) != fan_in:
                    raise ValueError(f"{path}: truncated weight row")
                W[i] = [float(v) for v in row]
            brow = fh.readline().split()
            if len(brow) != fan_out:
                raise ValueError(f"{path}: truncated bias row")
            layers.append(Layer(W=W, b=np.array([float(v) for v in brow]),
                                activation=act))
    return Mlp(layers=layers, output_scale=output_scale)
