"""Core e-factor and martingale tests."""

import math

import numpy as np
import pytest

from seqci.errors import DimensionMismatch, UnsupportedModel, ZeroDenominator
from seqci.evalue import (
    CallableTestFunction,
    MartingaleState,
    Observation,
    TestConfig,
    e_factor_exact,
    e_factor_mc,
    mc_factor,
    naive_e_factor_mc,
    run_sequential_test,
    symmetry_e_factor,
    update_martingale,
    write_trace,
)
from seqci.modelx import DiscreteConditional, GaussianConditional


def h_identity():
    return CallableTestFunction(
        lambda x, y, z: float(np.atleast_1d(x)[0]),
        vectorized=lambda xs, y, z: np.asarray(xs, dtype=float),
    )


def h_exp():
    return CallableTestFunction(
        lambda x, y, z: math.exp(float(np.atleast_1d(x)[0])),
        vectorized=lambda xs, y, z: np.exp(np.asarray(xs, dtype=float)),
    )


def h_const(c=2.5):
    return CallableTestFunction(
        lambda x, y, z: c, vectorized=lambda xs, y, z: np.full(len(xs), c)
    )


Z0 = (0.0,)


def bernoulli_half():
    return DiscreteConditional([0.0, 1.0], {Z0: [0.5, 0.5]})


def uniform_123():
    return DiscreteConditional([1.0, 2.0, 3.0], {Z0: [1 / 3, 1 / 3, 1 / 3]})


class FakeDraws(DiscreteConditional):
    """Model whose sample_many returns a scripted sequence of draws."""

    def __init__(self, draws):
        super().__init__(sorted(set(draws)), {Z0: _uniform(len(set(draws)))})
        self._draws = list(draws)
        self.supports_exact = False

    def sample_many(self, z, m, rng):
        out, self._draws = self._draws[:m], self._draws[m:]
        return np.asarray(out, dtype=float)


def _uniform(k):
    return [1.0 / k] * k


class TestExactFactor:
    def test_constant_h_gives_one(self):
        obs = Observation(x=1.0, y=0.0, z=Z0)
        factor = e_factor_exact(h_const(3.7), obs, bernoulli_half())
        assert factor.value == 1.0
        assert factor.method == "exact-integral"
        assert factor.m_draws == 0

    def test_bernoulli_exp(self):
        # two-point support by hand: e / ((1 + e)/2)
        obs = Observation(x=1.0, y=0.0, z=Z0)
        factor = e_factor_exact(h_exp(), obs, bernoulli_half())
        expected = math.e / ((1.0 + math.e) / 2.0)
        assert factor.value == pytest.approx(expected, rel=1e-12)
        assert factor.value == pytest.approx(1.46212, abs=5e-6)

    def test_uniform_identity(self):
        obs = Observation(x=3.0, y=0.0, z=Z0)
        factor = e_factor_exact(h_identity(), obs, uniform_123())
        assert factor.value == pytest.approx(1.5, rel=1e-15)
        assert factor.denominator == pytest.approx(2.0)

    def test_zero_denominator(self):
        q = DiscreteConditional([0.0, 1.0], {Z0: [1.0, 0.0]})
        obs = Observation(x=1.0, y=0.0, z=Z0)
        with pytest.raises(ZeroDenominator):
            e_factor_exact(h_identity(), obs, q)

    def test_zero_over_zero_is_degenerate_one(self):
        q = DiscreteConditional([0.0, 1.0], {Z0: [1.0, 0.0]})
        obs = Observation(x=0.0, y=0.0, z=Z0)
        factor = e_factor_exact(h_identity(), obs, q)
        assert factor.value == 1.0
        assert factor.degenerate

    def test_gaussian_has_no_exact_path(self):
        q = GaussianConditional(weights=[0.5], intercept=0.0, sigma2=1.0)
        obs = Observation(x=1.0, y=0.0, z=[1.0, 0.3])
        with pytest.raises(UnsupportedModel):
            e_factor_exact(h_identity(), obs, q)


class TestMonteCarloFactor:
    def test_constant_h_exactly_one(self):
        rng = np.random.default_rng(0)
        obs = Observation(x=1.0, y=0.0, z=Z0)
        for m in (1, 7, 100):
            factor = e_factor_mc(h_const(), obs, bernoulli_half(), m, rng)
            assert factor.value == 1.0

    def test_pinned_draws(self):
        # obs.x=3, draws {1,2}: 3 / ((3+1+2)/3) = 1.5
        q = FakeDraws([1.0, 2.0])
        factor = e_factor_mc(h_identity(), Observation(x=3.0, y=0.0, z=Z0), q, 2, np.random.default_rng(0))
        assert factor.value == pytest.approx(1.5, rel=1e-15)
        # obs.x=2, draws {1,3}: 2 / ((2+1+3)/3) = 1.0
        q = FakeDraws([1.0, 3.0])
        factor = e_factor_mc(h_identity(), Observation(x=2.0, y=0.0, z=Z0), q, 2, np.random.default_rng(0))
        assert factor.value == pytest.approx(1.0, rel=1e-15)

    def test_bounded_by_m_plus_one(self):
        rng = np.random.default_rng(7)
        q = bernoulli_half()
        h = CallableTestFunction(
            lambda x, y, z: 1e6 if np.atleast_1d(x)[0] > 0.5 else 1e-12,
            vectorized=lambda xs, y, z: np.where(np.asarray(xs) > 0.5, 1e6, 1e-12),
        )
        obs = Observation(x=1.0, y=0.0, z=Z0)
        for m in (1, 5, 50):
            for _ in range(200):
                factor = e_factor_mc(h, obs, q, m, rng)
                assert factor.value <= m + 1

    def test_degenerate_zero_everywhere(self):
        h_zero = CallableTestFunction(lambda x, y, z: 0.0, vectorized=lambda xs, y, z: np.zeros(len(xs)))
        factor = e_factor_mc(h_zero, Observation(x=1.0, y=0.0, z=Z0), bernoulli_half(), 5, np.random.default_rng(1))
        assert factor.value == 1.0
        assert factor.degenerate

    def test_mean_one_quick(self):
        # reduced-scale version of the acceptance property
        rng = np.random.default_rng(42)
        q = uniform_123()
        h = h_identity()
        reps, m = 20000, 5
        xs = q.sample_many(Z0, reps, rng)
        values = np.array(
            [e_factor_mc(h, Observation(x=x, y=0.0, z=Z0), q, m, rng).value for x in xs]
        )
        se = values.std(ddof=1) / math.sqrt(reps)
        assert abs(values.mean() - 1.0) < 4 * se

    def test_naive_variant_anticonservative_quick(self):
        rng = np.random.default_rng(43)
        q = bernoulli_half()
        h = h_exp()
        reps, m = 20000, 1
        xs = q.sample_many(Z0, reps, rng)
        values = np.array(
            [naive_e_factor_mc(h, Observation(x=x, y=0.0, z=Z0), q, m, rng).value for x in xs]
        )
        se = values.std(ddof=1) / math.sqrt(reps)
        # E[h] * E[1/h] = (1+e)(1+1/e)/4 for Bernoulli(1/2), h = exp(x)
        expected = (1 + math.e) * (1 + 1 / math.e) / 4
        assert values.mean() - 1.0 > 4 * se
        assert values.mean() == pytest.approx(expected, abs=6 * se)

    def test_slot_sum_identity_quick(self):
        rng = np.random.default_rng(44)
        for m in (1, 5, 50):
            for _ in range(100):
                values = rng.exponential(size=m + 1)
                total = sum(mc_factor(values[j], np.delete(values, j)).value for j in range(m + 1))
                assert total == pytest.approx(m + 1, rel=1e-9)

    def test_exact_mc_consistency(self):
        rng = np.random.default_rng(45)
        q = uniform_123()
        h = h_exp()
        obs = Observation(x=2.0, y=0.0, z=Z0)
        exact = e_factor_exact(h, obs, q).value
        m = 100_000
        factor = e_factor_mc(h, obs, q, m, rng)
        draws_mean = factor.denominator  # (h_obs + sum)/ (m+1)
        # delta-method SE of the ratio via the spread of h values
        h_vals = h.evaluate_many(q.sample_many(Z0, m, np.random.default_rng(46)), 0.0, Z0)
        se_denom = h_vals.std(ddof=1) / math.sqrt(m + 1)
        se_ratio = factor.numerator * se_denom / draws_mean**2
        assert abs(factor.value - exact) < 3 * se_ratio


class TestMartingale:
    def test_product_of_ones(self):
        state = MartingaleState.initial(0.05)
        state = update_martingale(state, mc_factor(1.0, np.array([1.0])))
        assert state.n == 1
        assert state.log_s == 0.0
        assert not state.crossed

    def test_crossing_from_ten_times_two_and_half(self):
        state = MartingaleState(n=3, log_s=math.log(10), max_log_s=math.log(10), threshold_log=math.log(20))
        factor = mc_factor(2.5, np.array([1.0]))
        # force the exact value 2.5
        state = update_martingale(
            state, type(factor)(2.5, 2.5, 1.0, "monte-carlo", 1)
        )
        assert state.log_s == pytest.approx(math.log(25))
        assert state.crossed
        assert state.stopped_at == 4

    def test_zero_factor_absorbs(self):
        from seqci.evalue import EFactor

        state = MartingaleState.initial(0.05)
        state = update_martingale(state, EFactor(0.0, 0.0, 1.0, "monte-carlo", 1))
        assert state.log_s == -math.inf
        state = update_martingale(state, EFactor(5.0, 5.0, 1.0, "monte-carlo", 1))
        assert state.log_s == -math.inf
        assert not state.crossed

    def test_input_state_unchanged(self):
        from seqci.evalue import EFactor

        state = MartingaleState.initial(0.05)
        update_martingale(state, EFactor(2.0, 2.0, 1.0, "monte-carlo", 1))
        assert state.n == 0 and state.log_s == 0.0


class TestDriver:
    def test_empty_stream(self):
        state, trace = run_sequential_test([], h_identity(), bernoulli_half(), TestConfig())
        assert state.n == 0
        assert state.log_s == 0.0
        assert trace == []

    def test_h_ignoring_x_never_stops(self):
        rng = np.random.default_rng(5)
        q = bernoulli_half()
        h = CallableTestFunction(
            lambda x, y, z: 1.0 + y, vectorized=lambda xs, y, z: np.full(len(xs), 1.0 + y)
        )
        stream = [Observation(x=q.sample(Z0, rng), y=float(rng.integers(2)), z=Z0) for _ in range(300)]
        state, trace = run_sequential_test(stream, h, q, TestConfig(alpha=0.05, m_draws=20, rng_seed=1))
        assert not state.crossed
        assert np.allclose([rec.factor for rec in trace], 1.0, rtol=1e-12)

    def test_exact_path_selected_for_discrete(self):
        rng = np.random.default_rng(6)
        q = uniform_123()
        stream = [Observation(x=q.sample(Z0, rng), y=0.0, z=Z0) for _ in range(50)]
        state, trace = run_sequential_test(stream, h_identity(), q, TestConfig(m_draws=3, rng_seed=2))
        # factors must equal the exact ratio x / 2 at every step
        for obs, rec in zip(stream, trace):
            assert rec.factor == pytest.approx(float(obs.x[0]) / 2.0, rel=1e-12)

    def test_stop_on_cross_halts_stream(self):
        q = uniform_123()
        h = h_exp()
        stream = [Observation(x=3.0, y=0.0, z=Z0) for _ in range(100)]
        cfg = TestConfig(alpha=0.05, m_draws=5, rng_seed=3, stop_on_cross=True)
        state, trace = run_sequential_test(stream, h, q, cfg)
        assert state.crossed
        assert len(trace) == state.stopped_at < 100

    def test_dimension_mismatch_detected(self):
        q = bernoulli_half()
        stream = [
            Observation(x=1.0, y=0.0, z=Z0),
            Observation(x=1.0, y=0.0, z=(0.0, 1.0)),
        ]
        with pytest.raises(DimensionMismatch):
            run_sequential_test(stream, h_const(), q, TestConfig(m_draws=2))

    def test_observe_called_after_factor(self):
        calls = []

        class Spy(CallableTestFunction):
            def evaluate(self, x, y, z):
                calls.append("eval")
                return 1.0

            def evaluate_many(self, xs, y, z):
                calls.append("eval")
                return np.ones(len(xs))

            def observe(self, obs):
                calls.append("observe")

        stream = [Observation(x=1.0, y=0.0, z=Z0)] * 3
        run_sequential_test(stream, Spy(lambda x, y, z: 1.0), bernoulli_half(), TestConfig(m_draws=2))
        # per step: evaluations first, then exactly one observe
        per_step = len(calls) // 3
        for k in range(3):
            step = calls[k * per_step : (k + 1) * per_step]
            assert step[-1] == "observe"
            assert all(c == "eval" for c in step[:-1])


class TestSymmetryFactor:
    def test_zero_point(self):
        assert symmetry_e_factor(0.0, 12.3) == 1.0

    def test_closed_form(self):
        assert symmetry_e_factor(math.log(2), 1.0) == pytest.approx(1.6, rel=1e-12)

    def test_saturation_without_overflow(self):
        assert abs(symmetry_e_factor(50.0, 1.0) - 2.0) < 1e-12
        assert abs(symmetry_e_factor(-50.0, 1.0)) < 1e-12
        assert math.isfinite(symmetry_e_factor(1e6, 1e6))

    def test_mean_one_under_symmetric_null(self):
        rng = np.random.default_rng(11)
        d = rng.standard_normal(200_000)
        values = np.array([symmetry_e_factor(di, 0.7) for di in d[:5000]])
        se = values.std(ddof=1) / math.sqrt(values.size)
        assert abs(values.mean() - 1.0) < 4 * se


def test_write_trace(tmp_path):
    q = uniform_123()
    stream = [Observation(x=3.0, y=0.0, z=Z0) for _ in range(3)]
    state, trace = run_sequential_test(stream, h_identity(), q, TestConfig(m_draws=2))
    path = tmp_path / "trace.csv"
    write_trace(path, trace)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "n,factor,log_s,crossed"
    assert len(lines) == 4
    first = lines[1].split(",")
    assert first[0] == "1"
    assert float(first[1]) == pytest.approx(1.5)
    assert first[3] in ("0", "1")
