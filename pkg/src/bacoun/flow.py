"""RealNVP density model, latent-shell boundary sampling and outlier ranking.

The flow maps data ``x`` to latent ``z``; ``log p(x) = log N(z; 0, sigma^2 I) + log|det dz/dx|``.
Each layer is a frozen affine normalizer followed by an affine coupling whose
scale is squashed as ``bound * tanh(raw / bound)``.

One-dimensional data cannot be split by a coupling mask, so it is paired with an
auxiliary standard-normal coordinate. Densities of 1-D data marginalize that
coordinate with Gauss-Hermite quadrature; inversion drops it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .errors import ShapeError, StateError
from .nn import Adam, Mlp, MlpConfig, as_rng

SCALE_BOUND = 5.0
_AUX_NODES, _AUX_WEIGHTS = hermegauss(24)


@dataclass(frozen=True)
class ShellSpec:
    inner_radius: float = 3.0
    outer_radius: float = 3.1

    def __post_init__(self):
        if not 0 < self.inner_radius < self.outer_radius:
            raise ValueError(
                f"shell needs 0 < inner < outer, got ({self.inner_radius}, {self.outer_radius})"
            )

    @property
    def thickness(self):
        return self.outer_radius - self.inner_radius


class CouplingLayer:
    """Normalizer ``h = (x - shift) / scale`` then ``y = m*h + (1-m)*(h*exp(s) + t)``.

    ``s`` and ``t`` are computed from ``m*h``; ``m == 1`` marks pass-through coordinates.
    """

    def __init__(self, mask, scale_net, translate_net, shift, scale):
        self.mask = np.asarray(mask, dtype=np.float64)
        self.scale_net = scale_net
        self.translate_net = translate_net
        self.shift = np.asarray(shift, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        d = len(self.mask)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        for net in (scale_net, translate_net):
            if net.config.input_dim != d or net.config.output_dim != d:
                raise ShapeError("coupling networks must map D -> D")
        if self.shift.shape != (d,) or self.scale.shape != (d,) or np.any(self.scale <= 0):
            raise ShapeError("normalizer statistics must be positive length-D vectors")

    def params(self):
        return self.scale_net.params() + self.translate_net.params()

    def _st(self, xm):
        inv = 1.0 - self.mask
        raw = self.scale_net.logits(xm)
        s = SCALE_BOUND * np.tanh(raw / SCALE_BOUND) * inv
        t = self.translate_net.logits(xm) * inv
        return s, t

    def forward(self, x):
        h = (x - self.shift) / self.scale
        xm = h * self.mask
        s, t = self._st(xm)
        y = xm + (1.0 - self.mask) * (h * np.exp(s) + t)
        log_det = s.sum(axis=1) - np.log(self.scale).sum()
        return y, log_det

    def inverse(self, y):
        ym = y * self.mask
        s, t = self._st(ym)
        h = ym + (1.0 - self.mask) * (y - t) * np.exp(-s)
        x = h * self.scale + self.shift
        log_det = -s.sum(axis=1) + np.log(self.scale).sum()
        return x, log_det

    def forward_train(self, x, nets):
        """Forward pass through ``nets`` (live parameter views), keeping a cache."""
        snet, tnet = nets
        inv = 1.0 - self.mask
        h = (x - self.shift) / self.scale
        xm = h * self.mask
        raw, sc = snet.forward_with_cache(xm)
        th = np.tanh(raw / SCALE_BOUND)
        s = SCALE_BOUND * th * inv
        t, tc = tnet.forward_with_cache(xm)
        t = t * inv
        es = np.exp(s)
        y = xm + inv * (h * es + t)
        log_det = s.sum(axis=1) - np.log(self.scale).sum()
        return y, log_det, (h, th, es, sc, tc)

    def backward_train(self, cache, gy, glog, nets):
        """Gradients given dL/dy (N, D) and dL/dlog_det (N,)."""
        snet, tnet = nets
        h, th, es, sc, tc = cache
        inv = 1.0 - self.mask
        gh = gy * (self.mask + inv * es)
        gs = (gy * h * es + glog[:, None]) * inv
        graw = gs * (1.0 - th * th)
        gt = gy * inv
        gps, gxs = snet.backward(sc, graw)
        gpt, gxt = tnet.backward(tc, gt)
        gh = gh + (gxs + gxt) * self.mask
        return gps + gpt, gh / self.scale

    def to_dict(self):
        return {
            "mask": self.mask.astype(int).tolist(),
            "scale_net": self.scale_net.to_dict(),
            "translate_net": self.translate_net.to_dict(),
            "normalizer": {"shift": self.shift.tolist(), "scale": self.scale.tolist()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["mask"],
            Mlp.from_dict(d["scale_net"]),
            Mlp.from_dict(d["translate_net"]),
            d["normalizer"]["shift"],
            d["normalizer"]["scale"],
        )


class RealNvpFlow:
    """Stack of coupling layers over a ``dim``-dimensional input."""

    def __init__(self, dim, layers, base_sigma=1.0, trained=False):
        if base_sigma <= 0:
            raise ValueError("base_sigma must be positive")
        self.dim = int(dim)
        self.layers = list(layers)
        self.base_sigma = float(base_sigma)
        self.trained = trained
        if not self.layers:
            raise ValueError("flow needs at least one layer")
        for layer in self.layers:
            if len(layer.mask) != self.latent_dim:
                raise ShapeError("layer mask length does not match flow dimension")

    @property
    def latent_dim(self):
        return max(self.dim, 2)

    @classmethod
    def init(cls, dim, *, n_layers=5, hidden_dims=(64, 64), base_sigma=1.0, leaky_slope=0.01,
             rng=0, data=None):
        """Identity coupling nets (zero output layers); normalizers fitted to ``data`` if given."""
        rng = as_rng(rng)
        ld = max(int(dim), 2)
        cfg = MlpConfig(ld, tuple(hidden_dims), ld, leaky_slope=leaky_slope)
        layers = []
        for i in range(n_layers):
            mask = (np.arange(ld) % 2 == i % 2).astype(float)
            layers.append(
                CouplingLayer(
                    mask,
                    Mlp.init(cfg, rng, zero_last=True),
                    Mlp.init(cfg, rng, zero_last=True),
                    np.zeros(ld),
                    np.ones(ld),
                )
            )
        flow = cls(dim, layers, base_sigma)
        if data is not None:
            flow = flow.fit_normalizers(data)
        return flow

    def fit_normalizers(self, x):
        """Set each layer's normalizer to the mean/std of its input on ``x``, then freeze."""
        h = self._lift(self._check(x), aux=None)
        layers = []
        for layer in self.layers:
            std = h.std(axis=0)
            std = np.where(std > 0, std, 1.0)
            new = CouplingLayer(layer.mask, layer.scale_net, layer.translate_net, h.mean(axis=0), std)
            h, _ = new.forward(h)
            layers.append(new)
        return RealNvpFlow(self.dim, layers, self.base_sigma, self.trained)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"expected {self.dim} columns, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("flow input must be finite")
        return x

    def _lift(self, x, aux):
        if self.dim >= 2:
            return x
        u = np.zeros((x.shape[0], 1)) if aux is None else np.asarray(aux).reshape(-1, 1)
        return np.hstack([x, u])

    def forward(self, x):
        """Map data to latent space. Returns ``(z, log_det)``.

        For 1-D flows the auxiliary coordinate is set to zero and ``z`` has two columns.
        """
        return self._forward_lifted(self._lift(self._check(x), aux=None))

    def _forward_lifted(self, h):
        log_det = np.zeros(h.shape[0])
        for layer in self.layers:
            h, ld = layer.forward(h)
            log_det += ld
        return h, log_det

    def inverse(self, z):
        """Map latent points to data space. Returns ``(x, log_det)`` of the inverse map."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"expected {self.latent_dim} latent columns, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent input must be finite")
        log_det = np.zeros(z.shape[0])
        h = z
        for layer in reversed(self.layers):
            h, ld = layer.inverse(h)
            log_det += ld
        return h[:, : self.dim], log_det

    def _base_log_prob(self, z):
        d = z.shape[1]
        s2 = self.base_sigma**2
        return -0.5 * (z * z).sum(axis=1) / s2 - 0.5 * d * np.log(2 * np.pi * s2)

    def log_prob(self, x):
        x = self._check(x)
        if self.dim >= 2:
            z, ld = self._forward_lifted(x)
            return self._base_log_prob(z) + ld
        # log p(x) = log sum_i w_i p(x, u_i) exp(u_i^2 / 2)
        terms = []
        for u, w in zip(_AUX_NODES, _AUX_WEIGHTS):
            z, ld = self._forward_lifted(self._lift(x, np.full(x.shape[0], u)))
            terms.append(self._base_log_prob(z) + ld + 0.5 * u * u + np.log(w))
        return logsumexp(np.stack(terms), axis=0)

    def params(self):
        out = []
        for layer in self.layers:
            out += layer.params()
        return out

    def with_params(self, params, trained=None):
        layers = []
        i = 0
        for layer in self.layers:
            ns = len(layer.scale_net.params())
            nt = len(layer.translate_net.params())
            sn = layer.scale_net.with_params(params[i:i + ns])
            tn = layer.translate_net.with_params(params[i + ns:i + ns + nt])
            i += ns + nt
            layers.append(CouplingLayer(layer.mask, sn, tn, layer.shift, layer.scale))
        return RealNvpFlow(self.dim, layers, self.base_sigma,
                           self.trained if trained is None else trained)

    def to_dict(self):
        return {
            "dim": self.dim,
            "base_sigma": self.base_sigma,
            "trained": self.trained,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["dim"], [CouplingLayer.from_dict(l) for l in d["layers"]],
                   d["base_sigma"], d.get("trained", True))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _nll_and_grad(flow, live_nets, h, l2):
    n = h.shape[0]
    caches = []
    log_det = np.zeros(n)
    for layer, nets in zip(flow.layers, live_nets):
        h, ld, c = layer.forward_train(h, nets)
        caches.append(c)
        log_det += ld
    s2 = flow.base_sigma**2
    d = h.shape[1]
    logp = -0.5 * (h * h).sum(axis=1) / s2 - 0.5 * d * np.log(2 * np.pi * s2) + log_det
    loss = -logp.mean()
    gy = h / (s2 * n)
    glog = np.full(n, -1.0 / n)
    grads = []
    for layer, nets, c in zip(reversed(flow.layers), reversed(live_nets), reversed(caches)):
        g, gy = layer.backward_train(c, gy, glog, nets)
        grads = g + grads
    if l2:
        for layer, nets in zip(flow.layers, live_nets):
            for net in nets:
                loss += l2 * net.l2_term()
        k = 0
        for layer, nets in zip(flow.layers, live_nets):
            for net in nets:
                for w in net.weights:
                    grads[k] = grads[k] + 2.0 * l2 * w
                    k += 2
    return float(loss), grads


def train_flow(flow, x, *, epochs, batch_size=256, learning_rate=1e-3, l2=0.0, seed=0):
    """Maximum-likelihood training with Adam. Returns ``(trained_flow, nll_history)``.

    ``nll_history[0]`` is the mean NLL of the untrained flow on ``x``; each further
    entry is the mean NLL after an epoch. ``l2`` multiplies the summed squared
    weights of every coupling network.
    """
    x = flow._check(x)
    if x.shape[0] == 0:
        raise ValueError("train_flow: empty data")
    rng = as_rng(seed)
    params = [p.copy() for p in flow.params()]
    live = []
    i = 0
    for layer in flow.layers:
        ns = len(layer.scale_net.params())
        nt = len(layer.translate_net.params())
        live.append((layer.scale_net._live_view(params[i:i + ns]),
                     layer.translate_net._live_view(params[i + ns:i + ns + nt])))
        i += ns + nt
    opt = Adam(params, learning_rate=learning_rate)
    n = x.shape[0]
    history = [float(-flow.log_prob(x).mean())]
    for _ in range(epochs):
        perm = rng.permutation(n)
        aux = rng.standard_normal(n) if flow.dim == 1 else None
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            h = flow._lift(x[idx], None if aux is None else aux[idx])
            _, grads = _nll_and_grad(flow, live, h, l2)
            opt.update(params, grads)
        current = flow.with_params(params)
        history.append(float(-current.log_prob(x).mean()))
    return flow.with_params(params, trained=True), history


def sample_shell(spec, dim, n, rng):
    """Uniform directions with radii uniform in ``(inner, outer)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = as_rng(rng)
    u = rng.standard_normal((n, dim))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    while np.any(norms == 0):  # pragma: no cover - measure-zero event
        bad = norms[:, 0] == 0
        u[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(u, axis=1, keepdims=True)
    # rng.uniform draws from [low, high); redraw the measure-zero endpoint
    r = rng.uniform(spec.inner_radius, spec.outer_radius, size=n)
    while np.any(r <= spec.inner_radius):  # pragma: no cover
        bad = r <= spec.inner_radius
        r[bad] = rng.uniform(spec.inner_radius, spec.outer_radius, size=int(bad.sum()))
    return u / norms * r[:, None]


def generate_boundary(flow, spec, n, rng, *, require_trained=True):
    """Invert latent shell samples into data space."""
    if require_trained and not flow.trained:
        raise StateError("generate_boundary needs a trained flow")
    z = sample_shell(spec, flow.latent_dim, n, rng)
    x, _ = flow.inverse(z)
    if not np.all(np.isfinite(x)):
        raise StateError("flow inversion produced non-finite points")
    return x


@dataclass(frozen=True)
class OutlierSplit:
    kept: np.ndarray
    removed: np.ndarray
    log_probs: np.ndarray


def rank_lowest(scores, k):
    """Indices of the ``k`` lowest scores; ties go to the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= k <= len(scores):
        raise ValueError(f"k must be in [0, {len(scores)}], got {k}")
    order = np.lexsort((np.arange(len(scores)), scores))
    return np.sort(order[:k]), np.sort(order[k:])


def outlier_filter(flow, x, k):
    """Drop the ``k`` rows with the lowest flow log-probability."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= k <= x.shape[0]:
        raise ValueError(f"k must be in [0, {x.shape[0]}], got {k}")
    lp = flow.log_prob(x)
    removed, kept = rank_lowest(lp, k)
    return OutlierSplit(kept=kept, removed=removed, log_probs=lp)
