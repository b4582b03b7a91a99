"""Trainable objectives with analytic gradients.

Two families are provided:

* :class:`QuadraticObjective` -- per-client quadratics used by the
  convergence-check harness, where smoothness and strong convexity are the
  extreme eigenvalues of the curvature matrix.
* :class:`SoftmaxClassifier` -- multinomial logistic regression or a
  rectifier MLP trained with cross-entropy, used by the federated
  experiments.  Parameters live in a single flat float64 vector.

Stochastic-gradient noise is modelled explicitly by :class:`NoiseModel` so
unbiasedness can be verified directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import as_vector

__all__ = [
    "ConvergenceError",
    "NoiseModel",
    "QuadraticObjective",
    "SoftmaxClassifier",
    "smoothness_constant",
    "stochastic_gradient",
]

NOISE_MODES = ("none", "gaussian", "minibatch")


class ConvergenceError(RuntimeError):
    """An iterative numeric routine failed to reach its tolerance."""


@dataclass(frozen=True)
class NoiseModel:
    """Stochastic-gradient noise description for one client.

    ``gaussian`` adds zero-mean isotropic noise with per-coordinate std
    ``sigma / sqrt(d)`` so the expected squared deviation from the exact
    gradient equals ``sigma**2``.  ``minibatch`` means the sampling noise
    comes from the caller's batch selection and nothing is added here.
    """

    mode: str = "none"
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.sigma < 0.0:
            raise ValueError("sigma must be >= 0")

    def perturb(self, grad: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.mode != "gaussian" or self.sigma == 0.0:
            return grad
        d = grad.shape[0]
        return grad + rng.normal(0.0, self.sigma / math.sqrt(d), size=d)


class QuadraticObjective:
    """``0.5 * (w - m)^T A (w - m)`` with symmetric PSD curvature ``A``."""

    def __init__(self, curvature, minimizer) -> None:
        A = np.asarray(curvature, dtype=np.float64)
        m = as_vector(minimizer, "minimizer")
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"curvature must be square, got shape {A.shape}")
        if A.shape[0] != m.shape[0]:
            raise ValueError("curvature and minimizer dimensions disagree")
        if not np.all(np.isfinite(A)):
            raise ValueError("curvature contains non-finite entries")
        if np.max(np.abs(A - A.T), initial=0.0) > 1e-12:
            raise ValueError("curvature must be symmetric within 1e-12")
        if np.linalg.eigvalsh(A)[0] < -1e-10:
            raise ValueError("curvature must be positive semidefinite")
        self.curvature = A
        self.minimizer = m

    @property
    def num_params(self) -> int:
        return self.minimizer.shape[0]

    def value(self, w, batch=None) -> float:
        r = as_vector(w, "w") - self.minimizer
        if r.shape[0] != self.num_params:
            raise ValueError("parameter dimension mismatch")
        return float(0.5 * r @ self.curvature @ r)

    def gradient(self, w, batch=None) -> np.ndarray:
        wv = as_vector(w, "w")
        if wv.shape[0] != self.num_params:
            raise ValueError("parameter dimension mismatch")
        return self.curvature @ (wv - self.minimizer)


def smoothness_constant(obj: QuadraticObjective, rtol: float = 1e-10,
                        max_iter: int = 10_000) -> float:
    """Largest eigenvalue of the curvature matrix via power iteration."""
    A = obj.curvature
    rng = np.random.default_rng(18127)  # fixed start keeps the result deterministic
    v = rng.standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam_prev = math.inf
    for _ in range(max_iter):
        av = A @ v
        nrm = float(np.linalg.norm(av))
        if nrm == 0.0:
            return 0.0
        lam = float(v @ av)
        v = av / nrm
        if abs(lam - lam_prev) <= rtol * max(abs(lam), 1e-300):
            return lam
        lam_prev = lam
    raise ConvergenceError(
        f"power iteration did not converge within {max_iter} iterations"
    )


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class SoftmaxClassifier:
    """Feed-forward softmax classifier with cross-entropy loss.

    ``layer_sizes = [d_in, C]`` is multinomial logistic regression; extra
    entries insert rectifier hidden layers.  Parameters flatten layer by
    layer, weight matrix first (row-major, shape ``fan_in x fan_out``) then
    bias, so the count is ``sum((fan_in + 1) * fan_out)``.
    """

    def __init__(self, layer_sizes) -> None:
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        if any(s < 1 for s in sizes):
            raise ValueError("layer sizes must be positive")
        self.layer_sizes = sizes
        self.num_params = sum(
            (fi + 1) * fo for fi, fo in zip(sizes[:-1], sizes[1:])
        )

    @property
    def kind(self) -> str:
        return "logistic-regression" if len(self.layer_sizes) == 2 else "mlp"

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def init_params(self, seed) -> np.ndarray:
        """Seeded symmetric-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        parts = []
        for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = math.sqrt(6.0 / (fi + fo))
            parts.append(rng.uniform(-bound, bound, size=fi * fo))
            parts.append(np.zeros(fo))
        return np.concatenate(parts)

    def _unpack(self, w: np.ndarray):
        if w.shape[0] != self.num_params:
            raise ValueError(
                f"expected {self.num_params} parameters, got {w.shape[0]}"
            )
        layers = []
        off = 0
        for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = w[off:off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = w[off:off + fo]
            off += fo
            layers.append((W, b))
        return layers

    def logits(self, w, features: np.ndarray) -> np.ndarray:
        layers = self._unpack(np.asarray(w, dtype=np.float64))
        a = np.asarray(features, dtype=np.float64)
        for W, b in layers[:-1]:
            a = _relu(a @ W + b)
        W, b = layers[-1]
        return a @ W + b

    def value(self, w, batch) -> float:
        """Mean cross-entropy of the batch; finite and >= 0."""
        features, labels = batch
        if len(labels) == 0:
            raise ValueError("batch must be non-empty")
        logp = _log_softmax(self.logits(w, features))
        return float(-logp[np.arange(len(labels)), labels].mean())

    def gradient(self, w, batch) -> np.ndarray:
        features, labels = batch
        if len(labels) == 0:
            raise ValueError("batch must be non-empty")
        layers = self._unpack(np.asarray(w, dtype=np.float64))
        X = np.asarray(features, dtype=np.float64)
        n = X.shape[0]

        pre = []
        acts = [X]
        a = X
        for W, b in layers[:-1]:
            z = a @ W + b
            pre.append(z)
            a = _relu(z)
            acts.append(a)
        W, b = layers[-1]
        logits = a @ W + b

        shifted = logits - logits.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        probs = expv / expv.sum(axis=1, keepdims=True)
        delta = probs
        delta[np.arange(n), labels] -= 1.0
        delta /= n

        grads = [None] * len(layers)
        for li in range(len(layers) - 1, -1, -1):
            Wl, _ = layers[li]
            gW = acts[li].T @ delta
            gb = delta.sum(axis=0)
            grads[li] = (gW, gb)
            if li > 0:
                delta = (delta @ Wl.T) * (pre[li - 1] > 0.0)

        return np.concatenate([np.concatenate([gW.ravel(), gb])
                               for gW, gb in grads])

    def predict(self, w, features: np.ndarray) -> np.ndarray:
        # argmax takes the first maximum, i.e. ties break to the lowest class index
        return np.argmax(self.logits(w, features), axis=1)

    def accuracy(self, w, features: np.ndarray, labels: np.ndarray) -> float:
        if len(labels) == 0:
            raise ValueError("dataset must be non-empty")
        return float(np.mean(self.predict(w, features) == np.asarray(labels)))


def stochastic_gradient(obj, w, batch, noise: NoiseModel,
                        rng: np.random.Generator) -> np.ndarray:
    """Unbiased gradient estimate: exact gradient plus modelled noise."""
    return noise.perturb(obj.gradient(w, batch), rng)
