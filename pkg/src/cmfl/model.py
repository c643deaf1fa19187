"""L2-regularized softmax classifier: loss, gradients, and local SGD.

Parameters are a flat vector: the ``d_in x num_classes`` weight matrix in
row-major order followed by ``num_classes`` biases. The L2 penalty covers the
whole vector, so every local objective is ``reg_coeff``-strongly convex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Partition, SampleSet
from .errors import ConfigError, DomainError

LAST_BATCH = "last_batch"
PSEUDO_GRADIENT = "pseudo_gradient"
UPLOAD_MODES = (LAST_BATCH, PSEUDO_GRADIENT)


@dataclass(frozen=True)
class LossSpec:
    reg_coeff: float
    num_classes: int
    d_in: int

    def __post_init__(self):
        if self.reg_coeff < 0:
            raise ConfigError("reg_coeff must be >= 0")
        if self.num_classes < 2 or self.d_in < 1:
            raise ConfigError("need num_classes >= 2 and d_in >= 1")

    @property
    def dim(self) -> int:
        return self.d_in * self.num_classes + self.num_classes

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)


@dataclass(frozen=True)
class Constant:
    eta: float

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError("learning rate must be >= 0")

    def rate(self, t: int) -> float:
        return self.eta


@dataclass(frozen=True)
class TheoremDecay:
    """eta_t = 1 / (mu (t + gamma)) with gamma = 4 L / mu."""

    mu: float
    L: float

    def __post_init__(self):
        if not (self.mu > 0 and self.L >= self.mu):
            raise ConfigError("TheoremDecay needs 0 < mu <= L")

    @property
    def gamma(self) -> float:
        return 4.0 * self.L / self.mu

    def rate(self, t: int) -> float:
        return 1.0 / (self.mu * (t + self.gamma))


def unpack(params, spec: LossSpec):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.dim,):
        raise DomainError(f"params must have shape ({spec.dim},), got {params.shape}")
    split = spec.d_in * spec.num_classes
    return params[:split].reshape(spec.d_in, spec.num_classes), params[split:]


def _as_samples(data) -> SampleSet:
    return data.samples if isinstance(data, Partition) else data


def _probs_and_nll(params, samples: SampleSet, spec: LossSpec):
    W, b = unpack(params, spec)
    z = samples.features @ W + b
    z -= z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(len(z)), samples.labels]
    probs = np.exp(z - logsum[:, None])
    return probs, nll


def loss(params, samples, spec: LossSpec) -> float:
    """Mean cross-entropy plus (reg_coeff / 2) * ||params||^2."""
    samples = _as_samples(samples)
    if len(samples) == 0:
        raise DomainError("loss over an empty sample set")
    _, nll = _probs_and_nll(params, samples, spec)
    params = np.asarray(params)
    return float(nll.mean() + 0.5 * spec.reg_coeff * params @ params)


def grad_minibatch(params, batch, spec: LossSpec) -> np.ndarray:
    batch = _as_samples(batch)
    if len(batch) == 0:
        raise DomainError("gradient over an empty batch")
    probs, _ = _probs_and_nll(params, batch, spec)
    resid = probs
    resid[np.arange(len(batch)), batch.labels] -= 1.0
    resid /= len(batch)
    gW = batch.features.T @ resid
    gb = resid.sum(axis=0)
    return np.concatenate([gW.ravel(), gb]) + spec.reg_coeff * np.asarray(params, dtype=np.float64)


def grad_full(params, partition, spec: LossSpec) -> np.ndarray:
    samples = _as_samples(partition)
    if len(samples) == 0:
        raise DomainError("gradient over an empty partition")
    return grad_minibatch(params, samples, spec)


def accuracy(params, samples, spec: LossSpec) -> float:
    samples = _as_samples(samples)
    if len(samples) == 0:
        raise DomainError("accuracy over an empty sample set")
    W, b = unpack(params, spec)
    pred = np.argmax(samples.features @ W + b, axis=1)
    return float(np.mean(pred == samples.labels))


def sample_gradient_spread(params, samples, spec: LossSpec):
    """Return (||grad F||^2, mean_i ||grad f_i - grad F||^2) in closed form.

    Per-sample data gradients are outer products x_i (p_i - e_{y_i}) with a bias
    row, so their squared norms factor as (||x_i||^2 + 1) * ||p_i - e_{y_i}||^2.
    The regularizer is common to every sample and cancels from the spread.
    """
    samples = _as_samples(samples)
    probs, _ = _probs_and_nll(params, samples, spec)
    resid = probs
    resid[np.arange(len(samples)), samples.labels] -= 1.0
    xsq = (samples.features ** 2).sum(axis=1) + 1.0
    mean_sq = float(np.mean(xsq * (resid ** 2).sum(axis=1)))
    g = grad_full(params, samples, spec)
    g_data = g - spec.reg_coeff * np.asarray(params)
    spread = max(mean_sq - float(g_data @ g_data), 0.0)
    return float(g @ g), spread


def minibatch_variance(params, samples, batch_size, spec: LossSpec) -> float:
    """Exact E||g_B - grad F||^2 for B drawn uniformly without replacement."""
    samples = _as_samples(samples)
    n = len(samples)
    if not 1 <= batch_size <= n:
        raise ConfigError(f"batch_size {batch_size} outside [1, {n}]")
    if n == 1 or batch_size == n:
        return 0.0
    _, spread = sample_gradient_spread(params, samples, spec)
    # finite-population correction for sampling without replacement
    return spread * (n - batch_size) / ((n - 1) * batch_size)


def smoothness_bound(samples, reg_coeff) -> float:
    """Global Lipschitz constant of the loss gradient: max_i (||x_i||^2 + 1) / 2 + reg.

    The softmax cross-entropy Hessian in the logits has spectral norm <= 1/2;
    the extra 1 accounts for the bias input. With no samples only the
    regularizer remains.
    """
    samples = _as_samples(samples)
    if len(samples) == 0:
        return float(reg_coeff)
    xsq = (samples.features ** 2).sum(axis=1) + 1.0
    return float(0.5 * xsq.max() + reg_coeff)


def _draw_batch(samples: SampleSet, batch_size, rng) -> SampleSet:
    return samples.subset(rng.choice(len(samples), size=batch_size, replace=False))


def local_sgd(params, partition, tau, batch_size, lr_schedule, round_t, rng, spec: LossSpec,
              upload_mode=LAST_BATCH):
    """Run ``tau`` mini-batch SGD steps from ``params``.

    Returns ``(final_params, uploaded_gradient)``. In ``last_batch`` mode the
    upload is the mini-batch gradient at the final iterate on a fresh batch; in
    ``pseudo_gradient`` mode it is ``(start - final) / eta_t``.
    """
    samples = _as_samples(partition)
    if tau < 1:
        raise ConfigError("tau must be >= 1")
    if not 1 <= batch_size <= len(samples):
        raise ConfigError(f"batch_size {batch_size} exceeds client size {len(samples)}")
    if upload_mode not in UPLOAD_MODES:
        raise ConfigError(f"unknown upload mode {upload_mode!r}")
    eta = lr_schedule.rate(round_t)
    start = np.asarray(params, dtype=np.float64)
    w = start.copy()
    for _ in range(tau):
        with np.errstate(over="ignore", invalid="ignore"):
            w = w - eta * grad_minibatch(w, _draw_batch(samples, batch_size, rng), spec)
        if not np.all(np.isfinite(w)):
            raise DomainError("non-finite parameters during local SGD")
    if upload_mode == LAST_BATCH:
        upload = grad_minibatch(w, _draw_batch(samples, batch_size, rng), spec)
    else:
        if eta == 0:
            raise ConfigError("pseudo-gradient upload is undefined for a zero learning rate")
        upload = (start - w) / eta
    return w, upload
