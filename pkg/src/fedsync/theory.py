"""Numerical verification of the convergence analysis on quadratics.

Each check evaluates one link in the single-step descent argument for
weighted-average aggregation:

* the variance decomposition of the aggregated stochastic gradient,
* the descent inequality itself, in two algebraic forms (see below),
* and the drift comparison between data-proportional and
  phase-synchronized weighting on paired runs.

Two forms of the descent bound are handled deliberately.  The form the
smoothness chain actually yields is

    E[F(w+)] <= F(w) - eta*||gF||^2 + (L*eta^2/2) * (||gF||^2 + sigma^2)

and that is the assertable property.  The commonly quoted variant swaps
``||gF||^2`` for the gradient-diversity term in the quadratic remainder;
it does not follow from the same chain and fails on simple instances
(e.g. a single noiseless client), so checkers only *report* its outcome
instead of asserting it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import ClientProblem
from .objectives import NoiseModel, QuadraticObjective, smoothness_constant

__all__ = [
    "DescentReport",
    "DriftComparisonReport",
    "TheoryInstance",
    "VarianceDecompositionReport",
    "descent_inequality_check",
    "drift_comparison",
    "equality_case_instance",
    "make_random_instance",
    "quadratic_clients",
    "variance_decomposition_check",
]

MC_SIGMA_TOLERANCE = 4.0  # standard errors


@dataclass(frozen=True)
class TheoryInstance:
    """Per-client quadratics with noise scales and a step size."""

    objectives: tuple        # QuadraticObjective per client
    p: np.ndarray
    sigmas: np.ndarray
    eta: float
    num_mc: int = 10_000

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=np.float64)
        sig = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "sigmas", sig)
        k = len(self.objectives)
        if p.shape != (k,) or sig.shape != (k,):
            raise ValueError("p and sigmas must have one entry per client")
        if np.any(p < 0.0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("p must be nonnegative and sum to 1")
        if np.any(sig < 0.0):
            raise ValueError("sigmas must be >= 0")
        if self.eta <= 0.0:
            raise ValueError("eta must be > 0")
        dims = {obj.num_params for obj in self.objectives}
        if len(dims) != 1:
            raise ValueError("all clients must share one dimension")

    @property
    def dim(self) -> int:
        return self.objectives[0].num_params

    @property
    def num_clients(self) -> int:
        return len(self.objectives)

    @property
    def sigma_sq(self) -> float:
        """Aggregate noise level ``sum_k p_k^2 sigma_k^2``."""
        return float(np.sum(self.p ** 2 * self.sigmas ** 2))

    def mixed_curvature(self) -> np.ndarray:
        acc = np.zeros((self.dim, self.dim))
        for pk, obj in zip(self.p, self.objectives):
            acc += pk * obj.curvature
        return acc

    def smoothness(self) -> float:
        """Largest eigenvalue of the weighted-mean curvature."""
        mixed = QuadraticObjective(self.mixed_curvature(), np.zeros(self.dim))
        return smoothness_constant(mixed)

    def global_value(self, w) -> float:
        return float(sum(pk * obj.value(w)
                         for pk, obj in zip(self.p, self.objectives)))

    def client_gradients(self, w) -> np.ndarray:
        return np.stack([obj.gradient(w) for obj in self.objectives])

    def global_gradient(self, w) -> np.ndarray:
        grads = self.client_gradients(w)
        return np.einsum("k,kd->d", self.p, grads)

    def gamma(self, w) -> float:
        """Gradient diversity ``sum p_k ||gF_k||^2 - ||gF||^2`` at ``w``."""
        grads = self.client_gradients(w)
        norms_sq = np.einsum("kd,kd->k", grads, grads)
        gbar = np.einsum("k,kd->d", self.p, grads)
        return float(np.sum(self.p * norms_sq) - gbar @ gbar)


def _client_noise(inst: TheoryInstance, rng: np.random.Generator,
                  draws: int) -> list:
    """Per-client isotropic noise matrices with E||xi_k||^2 = sigma_k^2."""
    scale = inst.sigmas / math.sqrt(inst.dim)
    return [rng.normal(0.0, scale[k], size=(draws, inst.dim))
            if scale[k] > 0.0 else np.zeros((draws, inst.dim))
            for k in range(inst.num_clients)]


@dataclass(frozen=True)
class VarianceDecompositionReport:
    draws: int
    grad_norm_sq: float
    sigma_sq: float
    mc_mean: float
    mc_se: float
    cross_mean: float
    cross_se: float
    equality_holds: bool
    upper_bound_holds: bool
    cross_terms_vanish: bool

    @property
    def ok(self) -> bool:
        return (self.equality_holds and self.upper_bound_holds
                and self.cross_terms_vanish)


def variance_decomposition_check(inst: TheoryInstance, w,
                                 rng: np.random.Generator
                                 ) -> VarianceDecompositionReport:
    """Monte-Carlo check of ``E||sum p_k g_k||^2 = ||gF||^2 + sum p_k^2 sigma_k^2``.

    Also verifies the upper bound by the aggregate noise level and that
    the cross-client noise terms vanish in expectation, all at a
    4-standard-error tolerance.
    """
    if inst.num_mc < 10_000:
        raise ValueError("variance decomposition needs num_mc >= 10^4")
    gbar = inst.global_gradient(w)
    grad_norm_sq = float(gbar @ gbar)

    noises = _client_noise(inst, rng, inst.num_mc)
    agg_noise = np.zeros((inst.num_mc, inst.dim))
    for pk, xi in zip(inst.p, noises):
        agg_noise += pk * xi
    samples = np.einsum("nd,nd->n", gbar + agg_noise, gbar + agg_noise)
    mc_mean = float(samples.mean())
    mc_se = float(samples.std(ddof=1) / math.sqrt(inst.num_mc)) \
        if inst.num_mc > 1 else 0.0

    cross = np.zeros(inst.num_mc)
    for i in range(inst.num_clients):
        for j in range(i + 1, inst.num_clients):
            cross += 2.0 * inst.p[i] * inst.p[j] * np.einsum(
                "nd,nd->n", noises[i], noises[j])
    cross_mean = float(cross.mean())
    cross_se = float(cross.std(ddof=1) / math.sqrt(inst.num_mc)) \
        if inst.num_mc > 1 else 0.0

    rhs = grad_norm_sq + inst.sigma_sq
    tol = MC_SIGMA_TOLERANCE * mc_se
    report = VarianceDecompositionReport(
        draws=inst.num_mc,
        grad_norm_sq=grad_norm_sq,
        sigma_sq=inst.sigma_sq,
        mc_mean=mc_mean,
        mc_se=mc_se,
        cross_mean=cross_mean,
        cross_se=cross_se,
        equality_holds=abs(mc_mean - rhs) <= max(tol, 1e-12),
        upper_bound_holds=mc_mean <= rhs + max(tol, 1e-12),
        cross_terms_vanish=abs(cross_mean)
        <= max(MC_SIGMA_TOLERANCE * cross_se, 1e-12),
    )
    return report


@dataclass(frozen=True)
class DescentReport:
    form: str                # proof-consistent | stated
    assertable: bool
    lhs_mean: float
    lhs_se: float
    rhs: float
    holds: bool
    margin: float            # rhs - lhs_mean


def _expected_next_values(inst: TheoryInstance, w,
                          rng: np.random.Generator | None):
    """Mean and SE of F after one aggregated stochastic step from ``w``."""
    gbar = inst.global_gradient(w)
    if float(np.max(inst.sigmas)) == 0.0:
        w_next = w - inst.eta * gbar
        return inst.global_value(w_next), 0.0
    if rng is None:
        raise ValueError("noisy instances need an rng for Monte Carlo")
    noises = _client_noise(inst, rng, inst.num_mc)
    agg = np.tile(gbar, (inst.num_mc, 1))
    for pk, xi in zip(inst.p, noises):
        agg += pk * xi
    w_next = w - inst.eta * agg
    values = np.zeros(inst.num_mc)
    for pk, obj in zip(inst.p, inst.objectives):
        diff = w_next - obj.minimizer
        values += pk * 0.5 * np.einsum("nd,de,ne->n", diff, obj.curvature,
                                       diff)
    return float(values.mean()), float(values.std(ddof=1)
                                       / math.sqrt(inst.num_mc))


def descent_inequality_check(inst: TheoryInstance, w, form: str,
                             rng: np.random.Generator | None = None,
                             smoothness_scale: float = 1.0) -> DescentReport:
    """Check one form of the single-step descent bound at ``w``.

    ``form='proof-consistent'`` uses the bound the smoothness chain
    yields (assertable); ``form='stated'`` uses the variant with the
    diversity term in place of the squared gradient norm (report only).
    ``smoothness_scale`` is a fault-injection knob: values below 1
    deliberately weaken L so checker failures can be exercised.
    """
    if form not in ("proof-consistent", "stated"):
        raise ValueError(f"unknown descent form {form!r}")
    wv = np.asarray(w, dtype=np.float64)
    L = inst.smoothness() * smoothness_scale
    eta = inst.eta
    f_now = inst.global_value(wv)
    gbar = inst.global_gradient(wv)
    grad_norm_sq = float(gbar @ gbar)
    lhs_mean, lhs_se = _expected_next_values(inst, wv, rng)

    quad_term = grad_norm_sq if form == "proof-consistent" else inst.gamma(wv)
    rhs = f_now - eta * grad_norm_sq \
        + 0.5 * L * eta ** 2 * (quad_term + inst.sigma_sq)

    slack = MC_SIGMA_TOLERANCE * lhs_se if lhs_se > 0.0 \
        else 1e-12 * max(1.0, abs(rhs))
    return DescentReport(
        form=form,
        assertable=form == "proof-consistent",
        lhs_mean=lhs_mean,
        lhs_se=lhs_se,
        rhs=rhs,
        holds=lhs_mean <= rhs + slack,
        margin=rhs - lhs_mean,
    )


def equality_case_instance(dim: int = 4, eta: float = 0.1) -> TheoryInstance:
    """Single noiseless client with identity curvature.

    On this instance the proof-consistent bound is tight: both sides
    reduce to ``0.5 * (1 - eta)^2 * ||w||^2``.
    """
    quad = QuadraticObjective(np.eye(dim), np.zeros(dim))
    return TheoryInstance((quad,), np.array([1.0]), np.array([0.0]), eta)


def make_random_instance(num_clients: int, dim: int, sigma: float,
                         eta: float, seed, num_mc: int = 10_000,
                         minimizer_scale: float = 2.0) -> TheoryInstance:
    """Random PSD quadratics with scattered minimizers (heterogeneous)."""
    rng = np.random.default_rng(seed)
    objectives = []
    for _ in range(num_clients):
        m_fac = rng.standard_normal((dim, dim)) / math.sqrt(dim)
        curv = m_fac.T @ m_fac + 0.1 * np.eye(dim)
        minimizer = minimizer_scale * rng.standard_normal(dim)
        objectives.append(QuadraticObjective(curv, minimizer))
    p = np.full(num_clients, 1.0 / num_clients)
    sigmas = np.full(num_clients, float(sigma))
    return TheoryInstance(tuple(objectives), p, sigmas, eta, num_mc)


def quadratic_clients(inst: TheoryInstance, noise_mode: str = "none") -> list:
    """Engine client problems wrapping the instance's quadratics."""
    return [
        ClientProblem(
            client_id=k,
            objective=obj,
            features=None,
            labels=None,
            noise=NoiseModel(noise_mode if noise_mode != "none" else "none",
                             float(inst.sigmas[k])),
            p_weight=float(inst.p[k]),
            num_samples=1,
        )
        for k, obj in enumerate(inst.objectives)
    ]


@dataclass(frozen=True)
class DriftComparisonReport:
    rounds: int
    fallback_rounds: int
    compared_rounds: int
    fraction_weighted_below: float
    rounds_to_target_baseline: int | None
    rounds_to_target_synced: int | None
    target_loss: float

    @property
    def vacuous(self) -> bool:
        return self.compared_rounds == 0


def _rounds_to_target(records: list, target: float) -> int | None:
    for rec in records:
        if rec.mean_train_loss <= target:
            return rec.round
    return None


def drift_comparison(baseline_records: list, synced_records: list,
                     target_loss: float) -> DriftComparisonReport:
    """Compare drift terms and rounds-to-target over paired runs.

    ``synced_records`` must come from a phase-synchronized run (they carry
    the per-round weight diagnostics); the drift comparison itself uses
    that run's gamma (data-proportional weights) against gamma_weighted
    (squared synchronization weights) at the same iterates, restricted to
    rounds where no fallback occurred.  The outcome is an empirical
    observation, not an asserted inequality.
    """
    if len(baseline_records) != len(synced_records):
        raise ValueError("paired runs must have the same number of rounds")
    non_fallback = [rec for rec in synced_records
                    if rec.sync is not None and not rec.sync.fallback_used]
    below = sum(1 for rec in non_fallback
                if rec.gamma_weighted < rec.gamma)
    compared = len(non_fallback)
    return DriftComparisonReport(
        rounds=len(synced_records),
        fallback_rounds=len(synced_records) - compared,
        compared_rounds=compared,
        fraction_weighted_below=below / compared if compared else 0.0,
        rounds_to_target_baseline=_rounds_to_target(baseline_records,
                                                    target_loss),
        rounds_to_target_synced=_rounds_to_target(synced_records,
                                                  target_loss),
        target_loss=target_loss,
    )
