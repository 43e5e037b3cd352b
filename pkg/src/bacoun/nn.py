"""Feed-forward networks with hand-written backprop, Adam, and categorical utilities.

Matrices are plain float64 numpy arrays of shape (rows, cols).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import entr

from .errors import ShapeError

__all__ = [
    "MlpConfig",
    "Mlp",
    "Adam",
    "softmax",
    "log_softmax",
    "categorical_entropy",
    "loss_and_grad",
    "train_mlp",
    "as_rng",
]


def as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def softmax(logits):
    """Row-wise softmax with max subtraction. Accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_entropy(p, *, atol=1e-9):
    """Entropy in nats of one or many categorical distributions (last axis).

    ``0 * log(0)`` is taken as 0.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("categorical_entropy: negative probability")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError("categorical_entropy: probabilities do not sum to 1")
    h = entr(p).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    leaky_slope: float = 0.01
    dropout_rate: float = 0.0
    l2_penalty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be nonempty")
        if self.input_dim < 1 or self.output_dim < 1 or min(self.hidden_dims) < 1:
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def feature_dim(self):
        """Width of the bias-augmented feature map."""
        return self.hidden_dims[-1] + 1


@dataclass
class _Cache:
    inputs: list = field(default_factory=list)  # input to each linear layer
    pre: list = field(default_factory=list)  # pre-activations of hidden layers
    masks: list = field(default_factory=list)  # scaled dropout masks or None


class Mlp:
    """Fully connected network ``input -> hidden... -> output`` with LeakyReLU.

    ``weights[i]`` has shape (fan_in, fan_out) and ``biases[i]`` shape (fan_out,).
    Instances are treated as immutable; training returns a new network.
    """

    def __init__(self, config, weights, biases):
        dims = config.layer_dims
        if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
            raise ShapeError("number of layers does not match config")
        self.config = config
        self.weights = []
        self.biases = []
        for i, (w, b) in enumerate(zip(weights, biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: expected weights {(dims[i], dims[i + 1])}, got {w.shape}"
                )
            w.flags.writeable = False
            b.flags.writeable = False
            self.weights.append(w)
            self.biases.append(b)

    @classmethod
    def init(cls, config, rng, *, zero_last=False):
        """He-normal weights and zero biases; ``zero_last`` zeros the output layer."""
        rng = as_rng(rng)
        dims = config.layer_dims
        weights, biases = [], []
        for i in range(len(dims) - 1):
            gain = 2.0 / (1.0 + config.leaky_slope**2)
            w = rng.standard_normal((dims[i], dims[i + 1])) * np.sqrt(gain / dims[i])
            if zero_last and i == len(dims) - 2:
                w = np.zeros_like(w)
            weights.append(w)
            biases.append(np.zeros(dims[i + 1]))
        return cls(config, weights, biases)

    @classmethod
    def zeros(cls, config):
        dims = config.layer_dims
        return cls(
            config,
            [np.zeros((dims[i], dims[i + 1])) for i in range(len(dims) - 1)],
            [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)],
        )

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self):
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (read-only views)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params):
        return Mlp(self.config, params[0::2], params[1::2])

    def _live_view(self, params):
        # shares ``params`` without copying; only for use inside optimizer loops
        net = object.__new__(Mlp)
        net.config = self.config
        net.weights = list(params[0::2])
        net.biases = list(params[1::2])
        return net

    def last_layer(self):
        """Output weights stacked with the bias row: shape (feature_dim, output_dim)."""
        return np.vstack([self.weights[-1], self.biases[-1][None, :]])

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"expected input with {self.config.input_dim} columns, got shape {x.shape}"
            )
        return x

    def _run(self, x, train, rng, keep_cache):
        cfg = self.config
        slope = cfg.leaky_slope
        cache = _Cache() if keep_cache else None
        h = x
        for i in range(self.n_layers - 1):
            if keep_cache:
                cache.inputs.append(h)
            a = h @ self.weights[i] + self.biases[i]
            # max form is the same function for slopes in [0, 1] and about twice as fast
            h = np.maximum(a, slope * a) if 0 <= slope <= 1 else np.where(a > 0, a, slope * a)
            mask = None
            if train and cfg.dropout_rate > 0:
                keep = 1.0 - cfg.dropout_rate
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            if keep_cache:
                cache.pre.append(a)
                cache.masks.append(mask)
        if keep_cache:
            cache.inputs.append(h)
        logits = h @ self.weights[-1] + self.biases[-1]
        return logits, h, cache

    def forward(self, x, *, train=False, rng=None):
        """Return ``(logits, features)``.

        ``features`` is the last hidden layer with a trailing column of ones.
        In train mode dropout masks are drawn from ``rng``; eval mode is deterministic.
        """
        x = self._check_input(x)
        if train and self.config.dropout_rate > 0 and rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        logits, h, _ = self._run(x, train, rng, keep_cache=False)
        features = np.hstack([h, np.ones((h.shape[0], 1))])
        return logits, features

    def logits(self, x):
        return self.forward(x)[0]

    def features(self, x):
        return self.forward(x)[1]

    def forward_with_cache(self, x, *, train=False, rng=None):
        x = self._check_input(x)
        logits, _, cache = self._run(x, train, rng, keep_cache=True)
        return logits, cache

    def backward(self, cache, grad_out):
        """Backprop ``grad_out`` (d loss / d logits) through a cached forward pass.

        Returns ``(param_grads, grad_input)`` with param_grads ordered like ``params()``.
        """
        slope = self.config.leaky_slope
        n = self.n_layers
        gw = [None] * n
        gb = [None] * n
        g = grad_out
        for i in range(n - 1, -1, -1):
            gw[i] = cache.inputs[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                mask = cache.masks[i - 1]
                if mask is not None:
                    g = g * mask
                g = np.where(cache.pre[i - 1] > 0, g, slope * g)
        grads = []
        for w, b in zip(gw, gb):
            grads += [w, b]
        return grads, g

    def l2_term(self):
        return sum(float(np.sum(w * w)) for w in self.weights)

    # serialization -------------------------------------------------------

    def to_dict(self):
        return {
            "config": asdict(self.config) | {"hidden_dims": list(self.config.hidden_dims)},
            "layers": [
                {"weights": w.tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        config = MlpConfig(**d["config"])
        layers = d["layers"]
        return cls(config, [l["weights"] for l in layers], [l["bias"] for l in layers])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def update(self, params, grads):
        if len(grads) != len(self.m):
            raise ShapeError("gradient list does not match optimizer state")
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step
        c2 = 1 - b2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


def loss_and_grad(mlp, x, y, l2=None, *, train=False, rng=None):
    """Mean cross-entropy plus ``l2 * sum(W**2)`` (biases excluded), and its gradient."""
    l2 = mlp.config.l2_penalty if l2 is None else l2
    y = np.asarray(y)
    k = mlp.config.output_dim
    if y.ndim != 1 or np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logits, cache = mlp.forward_with_cache(x, train=train, rng=rng)
    if len(y) != logits.shape[0]:
        raise ShapeError("labels and inputs differ in length")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    grads, _ = mlp.backward(cache, g)
    if l2:
        loss += l2 * mlp.l2_term()
        for i, w in enumerate(mlp.weights):
            grads[2 * i] = grads[2 * i] + 2.0 * l2 * w
    return float(loss), grads


def train_mlp(mlp, data, *, epochs, batch_size=256, learning_rate=1e-3, l2=None, seed=0,
              adam=None):
    """Mini-batch Adam on mean cross-entropy.

    ``data`` is anything with ``x`` and ``y`` attributes. Batches come from a fresh
    permutation each epoch; the last partial batch is kept. Returns the trained
    network and the per-epoch mean training loss.
    """
    x = np.asarray(data.x, dtype=np.float64)
    y = np.asarray(data.y)
    if x.shape[0] == 0:
        raise ValueError("train_mlp: empty dataset")
    if y.max() >= mlp.config.output_dim:
        raise ValueError("train_mlp: more classes than network outputs")
    rng = as_rng(seed)
    params = [p.copy() for p in mlp.params()]
    net = mlp._live_view(params)
    opt = adam or Adam(params, learning_rate=learning_rate)
    history = []
    n = x.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            loss, grads = loss_and_grad(net, x[idx], y[idx], l2, train=True, rng=rng)
            opt.update(params, grads)
            total += loss * len(idx)
        history.append(total / n)
    return mlp.with_params(params), history
