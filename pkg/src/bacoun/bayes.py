"""Bayesian multiclass logistic regression on fixed features.

Weights ``W`` have shape (feature_dim, K) with the bias row last, matching the
bias-augmented features produced by :meth:`bacoun.nn.Mlp.forward`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, StateError
from .nn import Adam, as_rng, categorical_entropy, log_softmax, softmax


_ROW_BLOCK = 128


@dataclass(frozen=True)
class LastLayerModel:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    prior_std: float = 1.0

    def __post_init__(self):
        phi = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if phi.ndim != 2 or phi.shape[0] != len(y):
            raise ShapeError("features must be (N, F) with one label per row")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")
        if not np.all(np.isfinite(phi)):
            raise ValueError("features must be finite")
        if self.prior_std <= 0:
            raise ValueError("prior_std must be positive")
        object.__setattr__(self, "features", phi)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "_onehot", np.eye(self.class_count)[y])

    @property
    def weight_shape(self):
        return (self.features.shape[1], self.class_count)


def log_posterior_and_grad(model, w):
    """Unnormalized log posterior ``sum_n log softmax(phi_n W)[y_n] - |W|^2 / (2 s^2)``."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != model.weight_shape:
        raise ShapeError(f"W must have shape {model.weight_shape}, got {w.shape}")
    s2 = model.prior_std**2
    logp = -0.5 * float(np.sum(w * w)) / s2
    grad = -w / s2
    # row blocks keep each slice of the feature matrix in cache for both products
    for start in range(0, len(model.labels), _ROW_BLOCK):
        phi = model.features[start:start + _ROW_BLOCK]
        onehot = model._onehot[start:start + _ROW_BLOCK]
        lsm = log_softmax(phi @ w)
        logp += float(np.sum(lsm * onehot))
        grad += ((onehot - np.exp(lsm)).T @ phi).T
    return logp, grad


@dataclass(frozen=True)
class HmcConfig:
    total_iterations: int = 1000
    burn_in: int = 100
    leapfrog_steps: int = 30
    step_size: float = 0.01
    seed: int = 0
    adapt: bool = True

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be positive")
        if not 0 <= self.burn_in < self.total_iterations:
            raise ValueError(
                f"burn_in ({self.burn_in}) must be below total_iterations ({self.total_iterations})"
            )
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be at least 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True)
class PosteriorSamples:
    """Weight draws (S, F, K), or member probabilities for MC-Dropout views."""

    samples: np.ndarray
    method: str
    acceptance_rate: float = float("nan")
    step_size: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 3:
            raise ShapeError("samples must be a (S, F, K) stack")
        if self.method not in ("hmc", "vi", "mc_dropout"):
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]

    def thin(self, count):
        """Keep ``count`` draws evenly spaced along the chain."""
        if count >= len(self):
            return self
        idx = np.linspace(0, len(self) - 1, count).round().astype(int)
        return PosteriorSamples(self.samples[idx], self.method, self.acceptance_rate,
                                self.step_size, self.extra)

    def to_dict(self):
        return {
            "method": self.method,
            "shape": list(self.samples.shape[1:]),
            "samples": self.samples.reshape(len(self), -1).tolist(),
            "acceptance_rate": None if np.isnan(self.acceptance_rate) else self.acceptance_rate,
            "step_size": None if np.isnan(self.step_size) else self.step_size,
        }

    @classmethod
    def from_dict(cls, d):
        shape = tuple(d["shape"])
        s = np.asarray(d["samples"], dtype=np.float64).reshape((-1, *shape))
        nan = float("nan")
        return cls(s, d["method"],
                   nan if d.get("acceptance_rate") is None else d["acceptance_rate"],
                   nan if d.get("step_size") is None else d["step_size"])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def leapfrog(logp_and_grad, w, p, step_size, n_steps, grad=None):
    """Leapfrog integration for ``H = -log p(w) + |p|^2 / 2`` (unit mass).

    Returns ``(w, p, logp, grad)`` at the end point.
    """
    if grad is None:
        grad = logp_and_grad(w)[1]
    p = p + 0.5 * step_size * grad
    for i in range(n_steps):
        w = w + step_size * p
        logp, grad = logp_and_grad(w)
        if i < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return w, p, logp, grad


def hmc_sample(model, config, initial=None):
    """Fixed-path HMC with unit mass matrix.

    During burn-in the step size is halved whenever an iteration's acceptance
    probability is below 0.4 and grown by 1.2x above 0.9; it is frozen afterwards.
    Returns ``total_iterations - burn_in`` draws.
    """
    rng = as_rng(config.seed)
    w = np.zeros(model.weight_shape) if initial is None else np.array(initial, dtype=np.float64)
    logp, grad = log_posterior_and_grad(model, w)
    if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
        raise NumericalError("log posterior is not finite at the initial state", iteration=0)
    eps = config.step_size
    kept = []
    accepted = 0
    target = lambda v: log_posterior_and_grad(model, v)  # noqa: E731
    for it in range(config.total_iterations):
        p0 = rng.standard_normal(w.shape)
        h0 = -logp + 0.5 * float(np.sum(p0 * p0))
        with np.errstate(over="ignore", invalid="ignore"):
            w1, p1, logp1, grad1 = leapfrog(target, w, p0, eps, config.leapfrog_steps, grad)
            h1 = -logp1 + 0.5 * float(np.sum(p1 * p1))
        log_ratio = h0 - h1
        accept_prob = float(np.exp(min(0.0, log_ratio))) if np.isfinite(log_ratio) else 0.0
        if rng.random() < accept_prob:
            w, logp, grad = w1, logp1, grad1
            if it >= config.burn_in:
                accepted += 1
        if it < config.burn_in:
            if config.adapt:
                if accept_prob < 0.4:
                    eps *= 0.5
                elif accept_prob > 0.9:
                    eps *= 1.2
        else:
            kept.append(w.copy())
    n_kept = config.total_iterations - config.burn_in
    return PosteriorSamples(np.stack(kept), "hmc", accepted / n_kept, eps)


@dataclass(frozen=True)
class MeanFieldParams:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu) != np.shape(self.log_sigma):
            raise ShapeError("mu and log_sigma must share a shape")

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    def sample(self, n, rng):
        rng = as_rng(rng)
        eps = rng.standard_normal((n, *self.mu.shape))
        return PosteriorSamples(self.mu + self.sigma * eps, "vi")


@dataclass(frozen=True)
class BbviResult:
    params: MeanFieldParams
    elbo_history: list
    samples: PosteriorSamples


def bbvi_fit(model, *, iterations=2000, learning_rate=1e-2, mc_samples=8, seed=0,
             n_draws=200, init_mu=None):
    """Mean-field Gaussian VI with reparameterized ELBO gradients and Adam.

    The KL term to the Gaussian prior is analytic; the expected log likelihood is a
    Monte Carlo average over ``mc_samples`` draws per step.
    """
    rng = as_rng(seed)
    shape = model.weight_shape
    var0 = model.prior_std**2
    mu = np.zeros(shape) if init_mu is None else np.array(init_mu, dtype=np.float64)
    log_sigma = np.full(shape, np.log(model.prior_std) - 2.0)
    params = [mu, log_sigma]
    opt = Adam(params, learning_rate=learning_rate)
    history = []
    for it in range(iterations):
        g_mu = np.zeros(shape)
        g_ls = np.zeros(shape)
        total = 0.0
        with np.errstate(over="ignore", invalid="ignore"):
            sigma = np.exp(log_sigma)
            for _ in range(mc_samples):
                eps = rng.standard_normal(shape)
                w = mu + sigma * eps
                lp, g = log_posterior_and_grad(model, w)
                # strip the prior back out, it is handled by the KL term
                total += lp + np.sum(w**2) / (2 * var0)
                g = g + w / var0
                g_mu += g
                g_ls += g * eps * sigma
            kl = float(np.sum(np.log(model.prior_std) - log_sigma
                              + (sigma**2 + mu**2) / (2 * var0) - 0.5))
            elbo = total / mc_samples - kl
        if not np.isfinite(elbo):
            raise NumericalError(f"ELBO became non-finite at iteration {it}", iteration=it)
        history.append(elbo)
        # Adam minimizes, so pass the negated ELBO gradient
        opt.update(params, [-(g_mu / mc_samples - mu / var0),
                            -(g_ls / mc_samples - (sigma**2 / var0 - 1.0))])
    fitted = MeanFieldParams(mu.copy(), log_sigma.copy())
    return BbviResult(fitted, history, fitted.sample(n_draws, rng))


def member_probabilities(samples, phi):
    """Softmax outputs of every posterior member at each query row: (S, N, K)."""
    if len(samples) == 0:
        raise StateError("no posterior samples")
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if samples.method == "mc_dropout":
        return samples.samples
    if phi.shape[1] != samples.samples.shape[1]:
        raise ShapeError(
            f"feature length {phi.shape[1]} does not match weights {samples.samples.shape[1]}"
        )
    logits = np.einsum("nf,sfk->snk", phi, samples.samples)
    return softmax(logits)


def posterior_predictive(samples, phi_star):
    """Mean of ``softmax(W^T phi)`` over posterior draws. Vector in, vector out."""
    phi = np.asarray(phi_star, dtype=np.float64)
    probs = member_probabilities(samples, phi).mean(axis=0)
    return probs[0] if phi.ndim == 1 else probs


@dataclass(frozen=True)
class UncertaintyReport:
    total: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray


def decompose_probs(members):
    """Split predictive entropy of member distributions ``(S, ..., K)``.

    aleatoric = mean member entropy, epistemic = entropy of the mean minus that,
    and ``total`` is reported as ``aleatoric + epistemic``.
    """
    members = np.asarray(members, dtype=np.float64)
    if members.shape[0] == 0:
        raise StateError("no ensemble members")
    predictive = members.mean(axis=0)
    h_mean = categorical_entropy(predictive)
    aleatoric = np.asarray(categorical_entropy(members)).mean(axis=0)
    epistemic = h_mean - aleatoric
    return UncertaintyReport(aleatoric + epistemic, aleatoric, epistemic)


def decompose_uncertainty(samples, phi_star):
    """Total / aleatoric / epistemic uncertainty (nats) at each query feature row."""
    phi = np.asarray(phi_star, dtype=np.float64)
    rep = decompose_probs(member_probabilities(samples, phi))
    if phi.ndim == 1 and samples.method != "mc_dropout":
        return UncertaintyReport(*(float(np.ravel(v)[0]) for v in
                                   (rep.total, rep.aleatoric, rep.epistemic)))
    return rep


def mc_dropout_predict(mlp, x, forward_passes, rng):
    """Members are softmax outputs of independent train-mode (dropout) forward passes."""
    if mlp.config.dropout_rate <= 0:
        raise ValueError("MC-Dropout needs a network with dropout_rate > 0")
    if forward_passes < 1:
        raise ValueError("forward_passes must be at least 1")
    rng = as_rng(rng)
    members = np.stack([softmax(mlp.forward(x, train=True, rng=rng)[0])
                        for _ in range(forward_passes)])
    return PosteriorSamples(members, "mc_dropout")
