"""Estimation-factor engine: the defining inequality, chaining, certification."""

from __future__ import annotations

import math

import numpy as np
import pytest

from qpe.models import BellConfig
from qpe.qef_engine import (
    CertificationResult,
    TrialFunction,
    certify_fmax,
    chain,
    constant_one,
    inner_max_tau,
    interval_bound,
    power_reduce,
    q_alpha,
    qef_inequality_check,
)
from qpe.quantum_core import CqDistribution, HermitianOperator, RenyiOrder


def random_density(rng: np.random.Generator, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


class TestTrialFunction:
    def test_role_validation(self):
        with pytest.raises(ValueError):
            TrialFunction({(0, 0): 1.0}, 0.1, role="mystery")
        with pytest.raises(ValueError):
            TrialFunction({(0, 0): 1.0}, None, role="qef")
        with pytest.raises(ValueError):
            TrialFunction({(0, 0): -0.5}, 0.1, role="qef")
        with pytest.raises(ValueError):
            TrialFunction({(0, 0): 1.0}, 0.7, role="qefp")

    def test_ee_admits_minus_infinity(self):
        F = TrialFunction({(0, 0): -math.inf, (1, 0): 2.0}, None, role="ee")
        assert F.value(0, 0) == -math.inf
        with pytest.raises(ValueError):
            TrialFunction({(0, 0): -math.inf}, 0.1, role="qef")

    def test_alpha_and_scaling(self):
        F = constant_one(2, 2, 0.25)
        assert abs(F.alpha - 1.25) <= 1e-15
        G = F.scaled(0.5)
        assert all(abs(v - 0.5) <= 1e-15 for v in G.values.values())
        assert abs(G.max_abs_log() - math.log(2.0)) <= 1e-12

    def test_json_round_trip(self):
        F = TrialFunction(
            {(0, 1): 0.5, (1, 0): 2.0, (0, 0): 1.0, (1, 1): 1.5}, 0.3, role="pef"
        )
        back = TrialFunction.from_json(F.to_json())
        assert back.values == F.values
        assert back.beta == F.beta
        assert back.role == "pef"
        assert TrialFunction.from_json(F.to_json(), role="qef").role == "qef"

    def test_json_round_robin_keys(self):
        F = TrialFunction({(0, 0, 0): 1.0, (0, 0, 1): 2.0}, 0.3)
        back = TrialFunction.from_json(F.to_json())
        assert back.values == F.values


class TestQAlpha:
    def test_constant_function_at_most_one(self):
        """F = 1 obeys the defining inequality at every canonical state."""
        rng = np.random.default_rng(30)
        for _ in range(100):
            k = int(rng.integers(1, 3))
            F = constant_one(k, k, float(rng.uniform(0.05, 1.0)))
            theta = rng.uniform(0.0, math.pi, size=k)
            tau = np.real(random_density(rng, 1 << k))
            tau = tau / np.trace(tau)
            assert q_alpha(F, theta, tau) <= 1.0 + 1e-10

    def test_equality_at_aligned_pure_state(self):
        F = constant_one(1, 1, 0.5)
        tau = np.diag([1.0, 0.0])
        assert abs(q_alpha(F, (0.0,), tau) - 1.0) <= 1e-12

    def test_hand_value_maximally_mixed(self):
        """k=1, theta=pi/2, F=1, alpha=2: four terms (1/2)(1/sqrt2)^2 sum to 1."""
        F = constant_one(1, 1, 1.0)
        got = q_alpha(F, (math.pi / 2.0,), np.eye(2) / 2.0)
        assert abs(got - 1.0) <= 1e-12

    def test_concavity_midpoint(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            F = constant_one(2, 2, 0.3).scaled(float(rng.uniform(0.5, 2.0)))
            theta = rng.uniform(0.0, math.pi, size=2)
            t1 = np.real(random_density(rng, 4))
            t2 = np.real(random_density(rng, 4))
            t1, t2 = t1 / np.trace(t1), t2 / np.trace(t2)
            mid = q_alpha(F, theta, (t1 + t2) / 2.0)
            avg = (q_alpha(F, theta, t1) + q_alpha(F, theta, t2)) / 2.0
            assert mid >= avg - 1e-10

    def test_dimension_mismatch(self):
        F = constant_one(2, 2, 0.3)
        with pytest.raises(ValueError):
            q_alpha(F, (0.0, 0.0), np.eye(2) / 2.0)


class TestQefInequalityCheck:
    def test_constant_function_nonnegative_slack(self, canonical_sampler):
        rng = np.random.default_rng(32)
        F = constant_one(2, 2, 0.3)
        for _ in range(50):
            rho = canonical_sampler(rng)
            assert qef_inequality_check(F, rho) >= -1e-10

    def test_certified_factor_slack(self, qef02, canonical_sampler):
        """Dividing by the certified supremum keeps the slack nonnegative."""
        rng = np.random.default_rng(33)
        worst = math.inf
        for _ in range(1000):
            rho = canonical_sampler(rng)
            worst = min(worst, qef_inequality_check(qef02, rho))
        assert worst >= -1e-10

    def test_diagonal_matches_classical_oracle(self):
        """On classical tables the slack is 1 - sum nu(cz) F(cz) nu(c|z)^beta."""
        rng = np.random.default_rng(34)
        beta = 0.2
        for _ in range(100):
            joint = rng.dirichlet(np.ones(8)).reshape(2, 4)
            rho = CqDistribution.classical(
                {(c, z): joint[c, z] for c in range(2) for z in range(4)}
            )
            F = TrialFunction(
                {(c, z): float(rng.uniform(0.0, 1.5)) for c in range(2) for z in range(4)},
                beta,
                role="qef",
            )
            nu_z = joint.sum(axis=0)
            oracle = 1.0 - sum(
                joint[c, z] * F.value(c, z) * (joint[c, z] / nu_z[z]) ** beta
                for c in range(2)
                for z in range(4)
                if joint[c, z] > 0.0
            )
            assert abs(qef_inequality_check(F, rho) - oracle) <= 1e-10


class TestChain:
    def test_all_ones_accumulate_zero(self):
        F = constant_one(2, 2, 0.1)
        records = [(c, z) for c in range(4) for z in range(4)]
        assert chain(F, records) == 0.0

    def test_law_of_large_numbers(self):
        """The per-trial mean of log F approaches its expectation."""
        rng = np.random.default_rng(35)
        values = {(0, 0): 1.3, (1, 0): 0.7, (0, 1): 1.1, (1, 1): 0.9}
        F = TrialFunction(values, 0.1, role="qef")
        keys = list(values)
        p = np.array([0.4, 0.1, 0.2, 0.3])
        logs = np.log([values[k] for k in keys])
        n = 100000
        draws = rng.choice(len(keys), size=n, p=p)
        records = [keys[i] for i in draws]
        total = chain(F, records)
        expect = float(p @ logs)
        se = float(np.sqrt(p @ (logs - expect) ** 2 / n))
        assert abs(total / n - expect) <= 3.0 * se

    def test_zero_value_flags_minus_infinity(self):
        F = TrialFunction({(0, 0): 0.0, (1, 0): 2.0}, 0.1, role="qef")
        with pytest.warns(RuntimeWarning):
            out = chain(F, [(1, 0), (0, 0), (1, 0)])
        assert out == -math.inf

    def test_adaptive_sequence_length_checked(self):
        F = constant_one(1, 1, 0.1)
        with pytest.raises(ValueError):
            chain([F, F], [(0, 0)])

    def test_two_trial_chained_inequality(self):
        """Products of per-trial factors stay factors on composed states.

        Trial-2 model states depend on the trial-1 outcome and input; the
        composed quantum memory is the tensor product (dimension 4).  Any
        pointwise-below-one function is a factor, so random such pairs give
        chained factors whose composed slack must stay nonnegative.
        """
        rng = np.random.default_rng(36)
        beta = 0.3
        for _ in range(20):
            f1 = {
                (c, z): float(rng.uniform(0.2, 1.0)) for c in (0, 1) for z in (0, 1)
            }
            f2 = {
                (c, z): float(rng.uniform(0.2, 1.0)) for c in (0, 1) for z in (0, 1)
            }
            p1 = rng.dirichlet(np.ones(2), size=2)  # p1[z1][c1]
            blocks = {}
            for c1 in (0, 1):
                for z1 in (0, 1):
                    rho1 = 0.5 * p1[z1][c1] * random_density(rng, 2)
                    p2 = rng.dirichlet(np.ones(2), size=2)
                    for c2 in (0, 1):
                        for z2 in (0, 1):
                            rho2 = 0.5 * p2[z2][c2] * random_density(rng, 2)
                            blocks[(c1 + 2 * c2, z1 + 2 * z2)] = np.kron(rho1, rho2)
            rho = CqDistribution(
                {k: HermitianOperator(v) for k, v in blocks.items()}
            )
            G = TrialFunction(
                {
                    (c1 + 2 * c2, z1 + 2 * z2): f1[(c1, z1)] * f2[(c2, z2)]
                    for c1 in (0, 1)
                    for z1 in (0, 1)
                    for c2 in (0, 1)
                    for z2 in (0, 1)
                },
                beta,
                role="qef",
            )
            assert qef_inequality_check(G, rho) >= -1e-9


class TestPowerReduce:
    def test_identity_at_gamma_one(self, qef02):
        G = power_reduce(qef02, 1.0)
        assert G.values == qef02.values
        assert G.beta == qef02.beta

    def test_constant_fixed_point(self):
        F = constant_one(2, 2, 0.4)
        G = power_reduce(F, 0.25)
        assert all(v == 1.0 for v in G.values.values())
        assert abs(G.beta - 0.1) <= 1e-15

    def test_reduced_factor_keeps_slack(self, qef02, canonical_sampler):
        rng = np.random.default_rng(37)
        G = power_reduce(qef02, 0.5)
        assert abs(G.beta - qef02.beta / 2.0) <= 1e-15
        for _ in range(100):
            rho = canonical_sampler(rng)
            assert qef_inequality_check(G, rho) >= -1e-9

    def test_gamma_domain(self, qef02):
        for gamma in (0.0, 1.5, -0.1):
            with pytest.raises(ValueError):
                power_reduce(qef02, gamma)


class TestInnerMaxTau:
    def test_commuting_scalar_oracle(self):
        """At theta = 0 all projectors are diagonal; the best state is a
        basis vector and the value reduces to a finite scalar maximum."""
        rng = np.random.default_rng(38)
        for _ in range(10):
            values = {
                (c, z): float(rng.uniform(0.1, 2.0))
                for c in range(4)
                for z in range(4)
            }
            F = TrialFunction(values, 0.3, role="candidate")
            oracle = max(
                sum(0.25 * values[(j, z)] for z in range(4)) for j in range(4)
            )
            out = inner_max_tau(F, (0.0, 0.0), tol=1e-9)
            assert out.converged
            assert abs(out.value - oracle) <= 1e-8
            assert out.upper_bound >= oracle - 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(39)
        from qpe.qef_engine import _BlockProblem

        for _ in range(10):
            n, d = 6, 4
            V = rng.standard_normal((n, d))
            V /= np.linalg.norm(V, axis=1)[:, None]
            w = rng.uniform(0.1, 1.0, size=n)
            alpha = 1.0 + float(rng.uniform(0.05, 0.6))
            prob = _BlockProblem(V, w, alpha)
            lam = rng.uniform(0.1, 1.0, size=d)
            lam /= lam.sum()
            basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
            tau = (basis * lam) @ basis.T
            lam_s, U = prob._decompose(tau)
            g, t = prob._value_from(lam_s, U)
            G = prob.gradient(lam_s, U, t)
            h = 1e-5
            for _ in range(4):
                E = rng.standard_normal((d, d))
                E = (E + E.T) / 2.0
                num = (prob.value(tau + h * E) - prob.value(tau - h * E)) / (2 * h)
                ana = float(np.sum(G * E))
                assert abs(num - ana) <= 1e-6 * max(1.0, abs(num))

    def test_single_qubit_matches_bloch_scan(self):
        """k=1, theta=pi/2, F=1, alpha=2: dense scan over Bloch radii."""
        F = constant_one(1, 1, 1.0)
        out = inner_max_tau(F, (math.pi / 2.0,), tol=1e-10)
        rs = np.linspace(0.0, 1.0, 2001)
        lam_hi, lam_lo = (1.0 + rs) / 2.0, (1.0 - rs) / 2.0
        a = (np.sqrt(lam_hi) + np.sqrt(lam_lo)) / 2.0
        b = (np.sqrt(lam_hi) - np.sqrt(lam_lo)) / 2.0
        scan = (2.0 * a**2 + b**2).max()
        assert out.converged
        assert abs(out.value - scan) <= 1e-8
        assert out.upper_bound >= scan - 1e-12

    def test_trace_brackets_every_iterate(self, pef02):
        """The eigenvalue certificate is an upper bound at every step."""
        F, _ = pef02
        out = inner_max_tau(F, (0.4, 1.1), tol=1e-9, keep_trace=True)
        assert out.trace is not None and len(out.trace) >= 1
        for g, ub in out.trace:
            assert ub >= g - 1e-12
        assert out.value <= out.upper_bound + 1e-12


class TestIntervalBound:
    def test_dominates_endpoints(self):
        rng = np.random.default_rng(40)
        for _ in range(200):
            f, fp = rng.uniform(0.0, 3.0, size=2)
            phi = float(rng.uniform(1e-3, math.pi / 2.0))
            order = RenyiOrder(1.0 + float(rng.uniform(0.01, 0.9)))
            bound = interval_bound(f, fp, phi, order)
            assert bound >= max(f, fp) - 1e-12

    def test_cap_for_equal_endpoints(self):
        order = RenyiOrder(1.3)
        for phi in (0.01, 0.1, 0.5):
            f = 1.7
            bound = interval_bound(f, f, phi, order)
            cap = (phi / math.sin(phi)) ** order.alpha * f
            assert f - 1e-12 <= bound <= cap + 1e-12

    def test_grid_oracle(self):
        """The returned maximum dominates a dense grid of the bound curve."""
        rng = np.random.default_rng(41)
        xs = np.linspace(0.0, 1.0, 1001)
        for _ in range(200):
            f, fp = rng.uniform(0.0, 2.0, size=2)
            phi = float(rng.uniform(1e-3, math.pi / 2.0))
            order = RenyiOrder(1.0 + float(rng.uniform(0.01, 0.9)))
            bound = interval_bound(f, fp, phi, order)
            x = xs * phi
            s0, s1 = np.sin(phi - x), np.sin(x)
            u = (s0 + s1) ** order.beta * (s0 * f + s1 * fp) / math.sin(phi) ** order.alpha
            assert bound >= u.max() - 1e-10
            cap = (phi / math.sin(phi)) ** order.alpha * max(f, fp)
            assert bound <= cap + 1e-12

    def test_width_domain(self):
        with pytest.raises(ValueError):
            interval_bound(1.0, 1.0, 2.0, RenyiOrder(1.2))
        with pytest.raises(ValueError):
            interval_bound(1.0, 1.0, 0.0, RenyiOrder(1.2))


class TestCertifyFmax:
    def test_constant_function_single_station(self):
        F = constant_one(1, 1, 0.1)
        config = BellConfig.uniform((0.0,))
        res = certify_fmax(F, config, 1e-3, seed=0)
        assert 1.0 - 1e-9 <= res.f_lower <= res.f_upper <= 1.0 + 1e-3 + 1e-6
        assert not res.gap_flag

    def test_scaling_homogeneity(self, pef02, cert02, config22):
        """Scaling the function scales the certified bracket."""
        F, _ = pef02
        res = certify_fmax(F.scaled(1.5), config22, 1.5e-3, seed=0)
        assert abs(res.f_lower - 1.5 * cert02.f_lower) <= 3e-3
        assert abs(res.f_upper - 1.5 * cert02.f_upper) <= 3e-3

    def test_region_bounds_are_sound(self):
        """Stored region caps dominate the inner maximum at interior angles."""
        F = TrialFunction(
            {(c, z): 1.0 + 0.1 * c - 0.05 * z for c in (0, 1) for z in (0, 1)},
            0.2,
            role="candidate",
        )
        config = BellConfig.uniform((0.0,))
        res = certify_fmax(F, config, 1e-3, seed=0, keep_regions=True)
        assert res.regions
        rng = np.random.default_rng(42)
        picks = rng.choice(len(res.regions), size=min(10, len(res.regions)), replace=False)
        for i in picks:
            region = res.regions[i]
            theta = tuple(
                float(rng.uniform(lo, hi)) for lo, hi in region.cuboid
            )
            inner = inner_max_tau(F, theta, tol=1e-6)
            assert region.upper_bound >= inner.value - 1e-9

    def test_witness_attains_f_lower(self, pef02, cert02):
        F, _ = pef02
        got = q_alpha(F, cert02.witness_theta, cert02.witness_tau)
        assert cert02.f_lower <= got + 1e-12

    def test_json_round_trip(self, cert02):
        back = CertificationResult.from_json(cert02.to_json())
        assert back.beta == cert02.beta
        assert back.f_lower == cert02.f_lower
        assert back.f_upper == cert02.f_upper
        assert back.witness_theta == cert02.witness_theta
        assert np.allclose(back.witness_tau.matrix, cert02.witness_tau.matrix)

    def test_gap_target_domain(self, pef02, config22):
        F, _ = pef02
        with pytest.raises(ValueError):
            certify_fmax(F, config22, 0.0)
