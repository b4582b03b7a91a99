"""Server-side update combination strategies.

Besides plain weighted averaging (FedAvg) this module implements
phase-synchronized aggregation: each client's update delta is treated as
an oscillator whose phase is its angle against the weighted mean update,
and per-round weights are derived from the phase configuration.  Two
weight rules are provided:

* ``sine-ratio`` -- rho_k = sin(theta_bar - theta_k) / sum_j sin(theta_bar
  - theta_j).  The denominator vanishes exactly for K = 2 and for any
  phase set symmetric about its mean, and is near zero whenever phases
  cluster (the offsets from the mean sum to zero, so their sines nearly
  cancel), so the rule is guarded: tiny denominators or exploding weight
  magnitudes fall back to the data-proportional weights.  Weights may be
  negative unless ``clamp_negative`` is set.
* ``stabilized`` -- rho_k proportional to p_k * max(0, cos theta_k),
  normalized.  This keeps the down-weighting of out-of-phase updates
  without the denominator pathology and is the default for experiments.

Every fallback is a recorded outcome, never an error, and a fallback
round aggregates exactly like FedAvg (given unit coupling).

SCAFFOLD control-variate bookkeeping and the FedProx proximal gradient
adjustment live here as well so all strategies share one home.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import as_vector, cosine_similarity

__all__ = [
    "ClientUpdate",
    "DegenerateRoundError",
    "KuramotoMode",
    "ScaffoldState",
    "SyncDiagnostics",
    "compute_phases",
    "fedavg_aggregate",
    "fedprox_gradient_adjustment",
    "kappa_schedule",
    "kuramoto_aggregate",
    "kuramoto_weights",
    "mean_update",
    "scaffold_server_step",
]

VARIANTS = ("sine-ratio", "stabilized")

WEIGHT_SUM_TOL = 1e-6


class DegenerateRoundError(RuntimeError):
    """The reference direction vanished; the caller should fall back."""


@dataclass(frozen=True)
class ClientUpdate:
    """One client's round output."""

    client_id: int
    delta: np.ndarray
    p_weight: float
    num_samples: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta", as_vector(self.delta, "delta"))
        if not 0.0 <= self.p_weight <= 1.0:
            raise ValueError("p_weight must lie in [0, 1]")


@dataclass(frozen=True)
class SyncDiagnostics:
    """Per-round synchronization internals.

    ``denominator`` is always the sine-ratio denominator
    ``sum_j sin(theta_bar - theta_j)`` so the field keeps one meaning
    across weight variants.  ``order_parameter`` is the magnitude of the
    mean unit phasor over client phases: 1 means perfect coherence.
    """

    theta: np.ndarray
    theta_bar: float
    rho: np.ndarray
    denominator: float
    fallback_used: bool
    order_parameter: float


@dataclass(frozen=True)
class KuramotoMode:
    """Weight-rule selection and degeneracy guards."""

    variant: str = "stabilized"
    epsilon_sync: float = 1e-3
    rho_max: float = 10.0
    clamp_negative: bool = False

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.epsilon_sync <= 0.0:
            raise ValueError("epsilon_sync must be > 0")
        if self.rho_max <= 0.0:
            raise ValueError("rho_max must be > 0")


@dataclass(frozen=True)
class ScaffoldState:
    """Server and per-client control variates, all in gradient units."""

    server_control: np.ndarray
    client_controls: tuple

    @classmethod
    def zeros(cls, dim: int, num_clients: int) -> "ScaffoldState":
        return cls(np.zeros(dim),
                   tuple(np.zeros(dim) for _ in range(num_clients)))


def _sorted_updates(updates) -> list:
    ordered = sorted(updates, key=lambda u: u.client_id)
    if not ordered:
        raise ValueError("updates must be non-empty")
    dim = ordered[0].delta.shape[0]
    if any(u.delta.shape[0] != dim for u in ordered):
        raise ValueError("all deltas in a round must share one length")
    return ordered


def _check_weight_sum(updates) -> None:
    total = sum(u.p_weight for u in updates)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"client weights sum to {total!r}, expected 1")


def _weighted_delta_sum(updates, weights) -> np.ndarray:
    acc = np.zeros_like(updates[0].delta)
    for u, w in zip(updates, weights):
        acc += w * u.delta
    return acc


def fedavg_aggregate(w, updates) -> np.ndarray:
    """``w + sum_k p_k * delta_k``, reduced in ascending client id order."""
    wv = as_vector(w, "w")
    ordered = _sorted_updates(updates)
    _check_weight_sum(ordered)
    return wv + _weighted_delta_sum(ordered, [u.p_weight for u in ordered])


def mean_update(updates) -> np.ndarray:
    """Weighted mean delta, the reference direction for phase computation.

    May be the zero vector when deltas cancel; that degeneracy surfaces in
    :func:`compute_phases`.
    """
    ordered = _sorted_updates(updates)
    _check_weight_sum(ordered)
    return _weighted_delta_sum(ordered, [u.p_weight for u in ordered])


def compute_phases(updates, reference) -> np.ndarray:
    """Angle of each delta against the reference direction, in [0, pi].

    A zero-norm delta carries no direction and is assigned pi/2 so it
    neither boosts nor opposes.  A zero-norm reference leaves every phase
    undefined and raises :class:`DegenerateRoundError`; callers should
    fall back to plain FedAvg aggregation for the round.
    """
    refv = as_vector(reference, "reference")
    ordered = _sorted_updates(updates)
    if float(np.linalg.norm(refv)) == 0.0:
        raise DegenerateRoundError(
            "reference direction has zero norm; fall back to fedavg_aggregate"
        )
    theta = np.empty(len(ordered))
    for i, u in enumerate(ordered):
        if float(np.linalg.norm(u.delta)) == 0.0:
            theta[i] = math.pi / 2.0
        else:
            theta[i] = math.acos(cosine_similarity(u.delta, refv))
    return theta


def kuramoto_weights(theta, p, mode: KuramotoMode):
    """Synchronization weights for one round, with full diagnostics.

    Returns ``(rho, diagnostics)``.  Whenever ``fallback_used`` is False
    the weights sum to 1.
    """
    theta = np.asarray(theta, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if theta.shape != p.shape or theta.ndim != 1 or theta.size < 1:
        raise ValueError("theta and p must be equal-length 1-d arrays")
    if np.any(theta < -1e-12) or np.any(theta > math.pi + 1e-12):
        raise ValueError("phases must lie in [0, pi]")

    theta_bar = float(theta.mean())
    raw = np.sin(theta_bar - theta)
    denominator = float(raw.sum())

    fallback = False
    rho = None
    if mode.variant == "sine-ratio":
        if abs(denominator) < mode.epsilon_sync:
            fallback = True
        else:
            rho = raw / denominator
            if float(np.abs(rho).max()) > mode.rho_max:
                fallback = True
                rho = None
            elif mode.clamp_negative:
                clamped = np.where(rho > 0.0, rho, 0.0)
                total = float(clamped.sum())
                if total == 0.0:
                    fallback = True
                    rho = None
                else:
                    rho = clamped / total
    else:  # stabilized
        gated = p * np.maximum(0.0, np.cos(theta))
        total = float(gated.sum())
        if total == 0.0:
            fallback = True
        else:
            rho = gated / total

    if fallback:
        rho = p.copy()

    order = float(abs(np.exp(1j * theta).mean()))
    diag = SyncDiagnostics(theta=theta, theta_bar=theta_bar, rho=rho,
                           denominator=denominator, fallback_used=fallback,
                           order_parameter=order)
    return rho, diag


def kappa_schedule(kappa0: float, beta: float, t: int) -> float:
    """Coupling strength at round ``t``: ``kappa0 / (1 + beta * t)``.

    ``beta = 0`` keeps the coupling constant; positive ``beta`` decays it
    monotonically.
    """
    if kappa0 <= 0.0:
        raise ValueError("kappa0 must be > 0")
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    if t < 0:
        raise ValueError("round index must be >= 0")
    return kappa0 / (1.0 + beta * t)


def kuramoto_aggregate(w, updates, mode: KuramotoMode, kappa_t: float):
    """Phase-weighted aggregation: ``w + kappa_t * sum_k rho_k * delta_k``.

    A degenerate reference (zero mean update) records every phase as pi/2,
    which drives the sine-ratio denominator to zero and hence the fallback
    path, so the round aggregates with data-proportional weights.  With
    ``kappa_t = 1`` a fallback round equals :func:`fedavg_aggregate`
    exactly.
    """
    wv = as_vector(w, "w")
    ordered = _sorted_updates(updates)
    _check_weight_sum(ordered)
    p = np.array([u.p_weight for u in ordered])
    reference = _weighted_delta_sum(ordered, p)
    try:
        theta = compute_phases(ordered, reference)
    except DegenerateRoundError:
        # phases are undefined; record the agnostic value and fall back
        theta = np.full(len(ordered), math.pi / 2.0)
        rho = p.copy()
        diag = SyncDiagnostics(theta=theta, theta_bar=math.pi / 2.0,
                               rho=rho, denominator=0.0, fallback_used=True,
                               order_parameter=1.0)
    else:
        rho, diag = kuramoto_weights(theta, p, mode)
    new_w = wv + kappa_t * _weighted_delta_sum(ordered, rho)
    return new_w, diag


def scaffold_server_step(state: ScaffoldState, w, updates,
                         client_control_deltas,
                         participation_fraction: float = 1.0):
    """SCAFFOLD server round: model step plus control-variate refresh.

    The model takes the weighted mean delta (identical to FedAvg when all
    corrections are zero); the server control moves by the mean client
    control change scaled by the participation fraction, and each client's
    stored control is replaced by its refreshed value.
    """
    ordered = _sorted_updates(updates)
    _check_weight_sum(ordered)
    deltas = list(client_control_deltas)
    if len(deltas) != len(ordered):
        raise ValueError("one control delta per update is required")
    dim = state.server_control.shape[0]
    if any(np.asarray(d).shape[0] != dim for d in deltas):
        raise ValueError("control delta dimension mismatch")

    new_w = fedavg_aggregate(w, ordered)
    new_controls = list(state.client_controls)
    mean_delta = np.zeros(dim)
    for u, d in zip(ordered, deltas):
        new_controls[u.client_id] = state.client_controls[u.client_id] + d
        mean_delta += d
    mean_delta /= len(ordered)
    new_server = state.server_control + participation_fraction * mean_delta
    return new_w, ScaffoldState(new_server, tuple(new_controls))


def fedprox_gradient_adjustment(g, w_local, w_global,
                                mu_prox: float) -> np.ndarray:
    """Proximal pull toward the broadcast model: ``g + mu * (w_local - w_global)``."""
    if mu_prox < 0.0:
        raise ValueError("mu_prox must be >= 0")
    gv = as_vector(g, "g")
    wl = as_vector(w_local, "w_local")
    wg = as_vector(w_global, "w_global")
    if gv.shape != wl.shape or wl.shape != wg.shape:
        raise ValueError("gradient and model dimensions must agree")
    if mu_prox == 0.0:
        return gv
    return gv + mu_prox * (wl - wg)
