import math

import numpy as np
import pytest

from fedsync.aggregation import (
    ClientUpdate,
    DegenerateRoundError,
    KuramotoMode,
    ScaffoldState,
    compute_phases,
    fedavg_aggregate,
    fedprox_gradient_adjustment,
    kappa_schedule,
    kuramoto_aggregate,
    kuramoto_weights,
    mean_update,
    scaffold_server_step,
)


def updates_from(deltas, p=None):
    k = len(deltas)
    p = [1.0 / k] * k if p is None else p
    return [ClientUpdate(i, np.asarray(d, dtype=np.float64), p[i], 1)
            for i, d in enumerate(deltas)]


def oracle_phases(deltas, p):
    """Brute-force phase evaluation with stdlib math only."""
    k = len(deltas)
    dim = len(deltas[0])
    ref = [math.fsum(p[i] * deltas[i][j] for i in range(k))
           for j in range(dim)]
    ref_norm = math.sqrt(math.fsum(x * x for x in ref))
    thetas = []
    for d in deltas:
        norm = math.sqrt(math.fsum(x * x for x in d))
        if norm == 0.0:
            thetas.append(math.pi / 2.0)
            continue
        cos = math.fsum(a * b for a, b in zip(d, ref)) / (norm * ref_norm)
        thetas.append(math.acos(min(1.0, max(-1.0, cos))))
    return thetas


def oracle_sine_ratio(thetas):
    """Raw sine-ratio weights, no guards."""
    tbar = math.fsum(thetas) / len(thetas)
    raw = [math.sin(tbar - t) for t in thetas]
    denom = math.fsum(raw)
    return [r / denom for r in raw], denom


class TestFedavgAggregate:
    def test_symmetric_average(self):
        ups = updates_from([[1.0, 0.0], [0.0, 1.0]], p=[0.5, 0.5])
        np.testing.assert_array_equal(
            fedavg_aggregate(np.zeros(2), ups), [0.5, 0.5])

    def test_single_client_identity(self):
        ups = [ClientUpdate(0, np.array([2.0, -1.0]), 1.0, 5)]
        np.testing.assert_array_equal(
            fedavg_aggregate(np.array([1.0, 1.0]), ups), [3.0, 0.0])

    def test_equal_deltas_convexity(self):
        ups = updates_from([[1.0, 1.0]] * 3, p=[0.2, 0.3, 0.5])
        np.testing.assert_allclose(
            fedavg_aggregate(np.array([1.0, 2.0]), ups), [2.0, 3.0],
            atol=1e-15)

    def test_weight_sum_guard(self):
        ups = updates_from([[1.0], [1.0]], p=[0.5, 0.6])
        with pytest.raises(ValueError, match="sum"):
            fedavg_aggregate(np.zeros(1), ups)

    def test_reduction_order_is_client_id(self):
        ups = updates_from([[1e16], [1.0], [-1e16]], p=[1 / 3] * 3)
        shuffled = [ups[2], ups[0], ups[1]]
        a = fedavg_aggregate(np.zeros(1), ups)
        b = fedavg_aggregate(np.zeros(1), shuffled)
        np.testing.assert_array_equal(a, b)


class TestMeanUpdate:
    def test_weighted_mean(self):
        ups = updates_from([[2.0, 0.0], [0.0, 2.0]], p=[0.5, 0.5])
        np.testing.assert_array_equal(mean_update(ups), [1.0, 1.0])

    def test_single_client(self):
        ups = [ClientUpdate(0, np.array([3.0]), 1.0, 1)]
        np.testing.assert_array_equal(mean_update(ups), [3.0])

    def test_opposing_deltas_cancel(self):
        ups = updates_from([[1.0, 0.0], [-1.0, 0.0]], p=[0.5, 0.5])
        np.testing.assert_array_equal(mean_update(ups), [0.0, 0.0])


class TestComputePhases:
    def test_parallel_is_zero(self):
        ups = updates_from([[2.0, 0.0]], p=[1.0])
        theta = compute_phases(ups, np.array([1.0, 0.0]))
        assert theta[0] == 0.0

    def test_orthogonal_is_half_pi(self):
        ups = updates_from([[0.0, 1.0]], p=[1.0])
        theta = compute_phases(ups, np.array([1.0, 0.0]))
        assert theta[0] == pytest.approx(math.pi / 2.0, abs=1e-15)

    def test_quarter_pi_closed_form(self):
        ups = updates_from([[1.0, 1.0]], p=[1.0])
        theta = compute_phases(ups, np.array([1.0, 0.0]))
        assert theta[0] == pytest.approx(0.7853981633974483, abs=1e-12)

    def test_zero_delta_gets_agnostic_phase(self):
        ups = updates_from([[0.0, 0.0], [1.0, 0.0]], p=[0.5, 0.5])
        theta = compute_phases(ups, np.array([1.0, 0.0]))
        assert theta[0] == math.pi / 2.0
        assert theta[1] == 0.0

    def test_zero_reference_raises(self):
        ups = updates_from([[1.0, 0.0]], p=[1.0])
        with pytest.raises(DegenerateRoundError, match="fedavg"):
            compute_phases(ups, np.zeros(2))

    def test_range_is_zero_to_pi(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            deltas = rng.standard_normal((4, 3))
            ups = updates_from(deltas, p=[0.25] * 4)
            theta = compute_phases(ups, mean_update(ups))
            assert np.all(theta >= 0.0) and np.all(theta <= math.pi)


class TestKuramotoWeights:
    def test_equal_phases_fall_back(self):
        for k in (2, 3, 7):
            p = np.full(k, 1.0 / k)
            rho, diag = kuramoto_weights(np.full(k, 0.4), p,
                                         KuramotoMode(variant="sine-ratio"))
            assert diag.fallback_used
            np.testing.assert_array_equal(rho, p)
            assert diag.denominator == pytest.approx(0.0, abs=1e-15)

    def test_two_clients_always_fall_back(self):
        # antisymmetry about the mean zeroes the denominator for K=2
        rng = np.random.default_rng(4)
        mode = KuramotoMode(variant="sine-ratio")
        for _ in range(100):
            theta = rng.uniform(0.0, math.pi, size=2)
            rho, diag = kuramoto_weights(theta, np.array([0.5, 0.5]), mode)
            assert diag.fallback_used

    def test_three_client_oracle_values(self):
        # brute-force oracle over theta = (0, 10, 90) degrees; frozen values
        theta = np.array([0.0, math.radians(10.0), math.radians(90.0)])
        p = np.full(3, 1.0 / 3.0)
        mode = KuramotoMode(variant="sine-ratio", rho_max=math.inf)
        rho, diag = kuramoto_weights(theta, p, mode)
        assert not diag.fallback_used
        oracle_rho, oracle_denom = oracle_sine_ratio(list(theta))
        np.testing.assert_allclose(rho, oracle_rho, atol=1e-12)
        assert diag.denominator == pytest.approx(0.11010093269702637,
                                                 abs=1e-12)
        np.testing.assert_allclose(
            rho, [4.990956612356175, 3.597424257331965, -7.588380869688141],
            atol=1e-9)
        # magnitudes near the default rho_max guard illustrate the blow-up
        # the guard exists for
        assert np.max(np.abs(rho)) > 7.0

    def test_rho_max_guard_triggers_fallback(self):
        # tighter phase cluster: denominator shrinks, magnitudes explode
        theta = np.array([0.0, math.radians(4.0), math.radians(30.0)])
        p = np.full(3, 1.0 / 3.0)
        unguarded, diag_u = kuramoto_weights(
            theta, p, KuramotoMode(variant="sine-ratio", rho_max=math.inf))
        assert np.max(np.abs(unguarded)) > 10.0
        rho, diag = kuramoto_weights(
            theta, p, KuramotoMode(variant="sine-ratio", rho_max=10.0))
        assert diag.fallback_used
        np.testing.assert_array_equal(rho, p)

    def test_epsilon_guard_triggers_fallback(self):
        # symmetric configuration about the mean: denominator is ~0
        theta = np.array([0.3, 0.5, 0.7, 0.9])
        rho, diag = kuramoto_weights(theta, np.full(4, 0.25),
                                     KuramotoMode(variant="sine-ratio"))
        assert diag.fallback_used
        assert abs(diag.denominator) < 1e-3

    def test_stabilized_orthogonal_gets_zero(self):
        rho, diag = kuramoto_weights(np.array([0.0, math.pi / 2.0]),
                                     np.array([0.5, 0.5]),
                                     KuramotoMode(variant="stabilized"))
        assert not diag.fallback_used
        np.testing.assert_allclose(rho, [1.0, 0.0], atol=1e-15)

    def test_stabilized_all_gated_falls_back(self):
        theta = np.array([2.0, 2.5, math.pi])  # every cosine negative
        p = np.full(3, 1.0 / 3.0)
        rho, diag = kuramoto_weights(theta, p,
                                     KuramotoMode(variant="stabilized"))
        assert diag.fallback_used
        np.testing.assert_array_equal(rho, p)

    def test_weights_normalized_when_not_fallback(self):
        rng = np.random.default_rng(9)
        for variant in ("sine-ratio", "stabilized"):
            mode = KuramotoMode(variant=variant)
            for _ in range(300):
                k = int(rng.integers(3, 9))
                theta = rng.uniform(0.0, math.pi, size=k)
                p = rng.uniform(0.1, 1.0, size=k)
                p /= p.sum()
                rho, diag = kuramoto_weights(theta, p, mode)
                if not diag.fallback_used:
                    assert math.fsum(rho) == pytest.approx(1.0, abs=1e-9)

    def test_stabilized_alignment_ordering(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            k = int(rng.integers(3, 8))
            theta = np.sort(rng.uniform(0.0, math.pi, size=k))
            p = np.full(k, 1.0 / k)
            rho, diag = kuramoto_weights(theta, p,
                                         KuramotoMode(variant="stabilized"))
            if diag.fallback_used:
                continue
            assert all(a >= b - 1e-12 for a, b in zip(rho, rho[1:]))

    def test_sine_ratio_ordering_inside_monotone_window(self):
        # on positive-denominator rounds with phases inside
        # (theta_bar - pi/2, theta_bar + pi/2), smaller phase means larger
        # raw weight
        rng = np.random.default_rng(12)
        mode = KuramotoMode(variant="sine-ratio", rho_max=math.inf)
        checked = 0
        while checked < 100:
            k = int(rng.integers(3, 8))
            theta = rng.uniform(0.2, math.pi - 0.2, size=k)
            tbar = theta.mean()
            if np.any(np.abs(theta - tbar) >= math.pi / 2.0):
                continue
            raw = np.sin(tbar - theta)
            if raw.sum() <= 1e-3:
                continue
            order = np.argsort(theta)
            assert all(raw[order[i]] >= raw[order[i + 1]] - 1e-12
                       for i in range(k - 1))
            checked += 1

    def test_clamp_negative_renormalizes(self):
        theta = np.array([0.0, math.radians(10.0), math.radians(90.0)])
        p = np.full(3, 1.0 / 3.0)
        mode = KuramotoMode(variant="sine-ratio", rho_max=math.inf,
                            clamp_negative=True)
        rho, diag = kuramoto_weights(theta, p, mode)
        assert not diag.fallback_used
        assert rho[2] == 0.0
        assert math.fsum(rho) == pytest.approx(1.0, abs=1e-12)
        assert all(r >= 0.0 for r in rho)

    def test_order_parameter_is_one_iff_phases_equal(self):
        p = np.full(3, 1.0 / 3.0)
        _, diag = kuramoto_weights(np.full(3, 1.1), p, KuramotoMode())
        assert diag.order_parameter == pytest.approx(1.0, abs=1e-12)
        _, diag = kuramoto_weights(np.array([0.1, 1.2, 2.9]), p,
                                   KuramotoMode())
        assert diag.order_parameter < 1.0 - 1e-9

    def test_phase_domain_validated(self):
        with pytest.raises(ValueError, match="pi"):
            kuramoto_weights(np.array([0.0, 3.5]), np.array([0.5, 0.5]),
                             KuramotoMode())

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            KuramotoMode(variant="bogus")
        with pytest.raises(ValueError):
            KuramotoMode(epsilon_sync=0.0)
        with pytest.raises(ValueError):
            KuramotoMode(rho_max=-1.0)


class TestKappaSchedule:
    def test_constant_when_beta_zero(self):
        for t in (0, 1, 10, 999):
            assert kappa_schedule(0.3, 0.0, t) == 0.3

    def test_closed_form(self):
        assert kappa_schedule(0.1, 1.0, 9) == pytest.approx(0.01, abs=1e-15)

    def test_monotone_nonincreasing(self):
        values = [kappa_schedule(0.5, 0.2, t) for t in range(50)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            kappa_schedule(0.0, 0.0, 0)
        with pytest.raises(ValueError):
            kappa_schedule(0.1, -0.1, 0)


class TestKuramotoAggregate:
    def test_identical_deltas_fall_back_to_scaled_fedavg(self):
        # the sine-ratio denominator vanishes when all phases coincide
        w = np.array([1.0, 2.0])
        ups = updates_from([[0.5, -0.5]] * 3, p=[1 / 3] * 3)
        new_w, diag = kuramoto_aggregate(
            w, ups, KuramotoMode(variant="sine-ratio"), 0.2)
        assert diag.fallback_used
        np.testing.assert_allclose(new_w, w + 0.2 * np.array([0.5, -0.5]),
                                   atol=1e-15)

    def test_zero_coupling_freezes_model(self):
        w = np.array([1.0, 2.0])
        ups = updates_from([[1.0, 0.0], [0.0, 1.0]], p=[0.5, 0.5])
        new_w, _ = kuramoto_aggregate(w, ups, KuramotoMode(), 0.0)
        np.testing.assert_array_equal(new_w, w)

    def test_stabilized_two_client_hand_pipeline(self):
        # deltas (1,0) and (0,1): mean is (0.5, 0.5), both phases pi/4,
        # equal gates, so rho = (0.5, 0.5)
        w = np.array([0.0, 0.0])
        ups = updates_from([[1.0, 0.0], [0.0, 1.0]], p=[0.5, 0.5])
        kappa = 0.4
        new_w, diag = kuramoto_aggregate(w, ups,
                                         KuramotoMode(variant="stabilized"),
                                         kappa)
        assert not diag.fallback_used
        np.testing.assert_allclose(diag.theta, [math.pi / 4.0] * 2,
                                   atol=1e-12)
        np.testing.assert_allclose(diag.rho, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(new_w, [kappa * 0.5, kappa * 0.5],
                                   atol=1e-15)

    def test_degenerate_reference_equals_fedavg_exactly(self):
        w = np.array([3.0, -1.0])
        ups = updates_from([[1.0, 0.0], [-1.0, 0.0]], p=[0.5, 0.5])
        new_w, diag = kuramoto_aggregate(w, ups, KuramotoMode(), 1.0)
        assert diag.fallback_used
        expected = fedavg_aggregate(w, ups)
        np.testing.assert_array_equal(new_w, expected)

    def test_fallback_equivalence_is_bitwise_at_unit_coupling(self):
        rng = np.random.default_rng(21)
        mode = KuramotoMode(variant="sine-ratio")
        for _ in range(50):
            w = rng.standard_normal(5)
            delta = rng.standard_normal(5)
            ups = updates_from([delta] * 4, p=[0.25] * 4)
            new_w, diag = kuramoto_aggregate(w, ups, mode, 1.0)
            assert diag.fallback_used
            np.testing.assert_array_equal(new_w, fedavg_aggregate(w, ups))

    def test_rotation_invariance(self):
        rng = np.random.default_rng(17)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        for _ in range(30):
            deltas = rng.standard_normal((5, 6))
            p = rng.uniform(0.1, 1.0, size=5)
            p /= p.sum()
            ups = updates_from(deltas, p=list(p))
            rotated = updates_from([q @ d for d in deltas], p=list(p))
            _, diag_a = kuramoto_aggregate(np.zeros(6), ups,
                                           KuramotoMode(), 1.0)
            _, diag_b = kuramoto_aggregate(np.zeros(6), rotated,
                                           KuramotoMode(), 1.0)
            np.testing.assert_allclose(diag_a.theta, diag_b.theta,
                                       atol=1e-9)
            np.testing.assert_allclose(diag_a.rho, diag_b.rho, atol=1e-9)

    def test_phase_scale_invariance_of_single_delta(self):
        rng = np.random.default_rng(18)
        deltas = rng.standard_normal((4, 3))
        p = [0.25] * 4
        ups = updates_from(deltas, p=p)
        reference = mean_update(ups)
        theta_before = compute_phases(ups, reference)
        for c in (1e-6, 0.5, 7.0, 1e6):
            scaled = [d.copy() for d in deltas]
            scaled[2] = c * scaled[2]
            theta = compute_phases(updates_from(scaled, p=p), reference)
            assert theta[2] == pytest.approx(theta_before[2], abs=1e-12)


class TestScaffoldServerStep:
    def test_reduces_to_fedavg_with_zero_deltas(self):
        w = np.array([1.0, -1.0])
        ups = updates_from([[0.5, 0.5], [-0.5, 0.5]], p=[0.5, 0.5])
        state = ScaffoldState.zeros(2, 2)
        new_w, new_state = scaffold_server_step(
            state, w, ups, [np.zeros(2), np.zeros(2)])
        np.testing.assert_array_equal(new_w, fedavg_aggregate(w, ups))
        np.testing.assert_array_equal(new_state.server_control, np.zeros(2))

    def test_control_bookkeeping(self):
        w = np.zeros(2)
        ups = updates_from([[1.0, 0.0], [0.0, 1.0]], p=[0.5, 0.5])
        state = ScaffoldState(np.array([0.1, 0.1]),
                              (np.array([0.2, 0.0]), np.array([0.0, 0.2])))
        deltas = [np.array([1.0, 0.0]), np.array([0.0, -1.0])]
        _, new_state = scaffold_server_step(state, w, ups, deltas,
                                            participation_fraction=1.0)
        np.testing.assert_allclose(new_state.client_controls[0], [1.2, 0.0])
        np.testing.assert_allclose(new_state.client_controls[1], [0.0, -0.8])
        np.testing.assert_allclose(new_state.server_control,
                                   [0.1 + 0.5, 0.1 - 0.5])

    def test_participation_fraction_scales_server_move(self):
        w = np.zeros(1)
        ups = updates_from([[1.0]], p=[1.0])
        state = ScaffoldState.zeros(1, 1)
        _, half = scaffold_server_step(state, w, ups, [np.array([2.0])],
                                       participation_fraction=0.5)
        np.testing.assert_allclose(half.server_control, [1.0])

    def test_dimension_mismatch(self):
        state = ScaffoldState.zeros(2, 1)
        ups = updates_from([[1.0, 0.0]], p=[1.0])
        with pytest.raises(ValueError, match="dimension"):
            scaffold_server_step(state, np.zeros(2), ups, [np.zeros(3)])


class TestFedproxAdjustment:
    def test_zero_mu_is_identity(self):
        g = np.array([1.0, -2.0])
        out = fedprox_gradient_adjustment(g, np.ones(2), np.zeros(2), 0.0)
        np.testing.assert_array_equal(out, g)

    def test_no_drift_is_identity(self):
        g = np.array([1.0, -2.0])
        w = np.array([3.0, 4.0])
        np.testing.assert_array_equal(
            fedprox_gradient_adjustment(g, w, w, 2.0), g)

    def test_pure_penalty(self):
        out = fedprox_gradient_adjustment(
            np.zeros(2), np.array([1.0, -1.0]), np.zeros(2), 1.0)
        np.testing.assert_array_equal(out, [1.0, -1.0])

    def test_negative_mu_rejected(self):
        with pytest.raises(ValueError):
            fedprox_gradient_adjustment(np.zeros(1), np.zeros(1),
                                        np.zeros(1), -0.5)


class TestPhaseWeightOracleAgreement:
    def test_random_sets_match_brute_force(self):
        # 200 random delta sets: implementation vs stdlib-math oracle
        rng = np.random.default_rng(33)
        mode = KuramotoMode(variant="sine-ratio", rho_max=math.inf,
                            epsilon_sync=1e-9)
        for _ in range(200):
            k = int(rng.integers(3, 9))
            dim = int(rng.integers(2, 7))
            deltas = rng.standard_normal((k, dim))
            p = rng.uniform(0.2, 1.0, size=k)
            p /= p.sum()
            ups = updates_from(deltas, p=list(p))
            reference = mean_update(ups)
            theta = compute_phases(ups, reference)
            oracle_t = oracle_phases([list(d) for d in deltas], list(p))
            np.testing.assert_allclose(theta, oracle_t, atol=1e-9)
            rho, diag = kuramoto_weights(theta, p, mode)
            if not diag.fallback_used:
                oracle_r, oracle_d = oracle_sine_ratio(oracle_t)
                np.testing.assert_allclose(rho, oracle_r, atol=1e-9)
