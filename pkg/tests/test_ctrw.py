import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import gamma
from scipy.stats import ks_2samp

from fracfilter import ctrw
from fracfilter import qstate as q
from fracfilter._validation import RangeError, ValidationError
from fracfilter.chain import run_chain_batch
from fracfilter.generators import GeneratorSpec, ObservablePolynomial
from conftest import SM, SX, SZ, KET0

SPEC = GeneratorSpec(0.5 * SX, ((0.8 * SM, 0.0),))


def test_degenerate_and_exponential_laws(rng):
    assert np.all(ctrw.sample_waiting(ctrw.WaitingLaw.degenerate(0.3), rng, 10) == 0.3)
    x = ctrw.sample_waiting(ctrw.WaitingLaw.exponential(4.0), rng, 1_000_000)
    assert abs(x.mean() - 0.25) < 3 * x.std() / np.sqrt(x.size)


def test_stable_tail_sampler_and_tail_condition(rng):
    beta = 0.7
    law = ctrw.WaitingLaw.stable_tail(beta)
    x = law.sample(rng, 1_000_000)
    ms = np.array([10.0, 100.0, 1000.0])
    for m in ms:
        p = law.survival(m)
        emp = (x > m).mean()
        assert abs(emp - p) < 3 * np.sqrt(p * (1 - p) / x.size)
    ratio = law.survival(ms) * beta * ms**beta
    assert np.all(np.diff(np.abs(ratio - 1)) < 0) and abs(ratio[-1] - 1) < 0.01


def test_stable_tail_scaling(rng):
    beta, s = 0.6, 0.01
    a = ctrw.WaitingLaw.stable_tail(beta, scale=s).sample(np.random.default_rng(1), 1000)
    b = ctrw.WaitingLaw.stable_tail(beta).sample(np.random.default_rng(1), 1000)
    assert np.allclose(a, s ** (1 / beta) * b)


def test_law_validation():
    with pytest.raises(ValidationError):
        ctrw.WaitingLaw.stable_tail(1.2)
    with pytest.raises(ValidationError):
        ctrw.WaitingLaw.mixture([(0.5, 0.3), (0.4, 0.6)])
    with pytest.raises(ValidationError):
        ctrw.WaitingLaw.degenerate(-1.0)


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_subordinator_laplace_transform(lam):
    beta = 0.7
    grid = np.linspace(0.0, 1.0, 11)
    rng = np.random.default_rng(int(lam * 10))
    S1 = np.array([ctrw.simulate_subordinator(beta, grid, rng).values[-1] for _ in range(20000)])
    e = np.exp(-lam * S1)
    assert abs(e.mean() - np.exp(-lam**beta)) < 3 * e.std() / np.sqrt(e.size)


def test_subordinator_self_similarity():
    beta, c = 0.7, 3.0
    a = ctrw.simulate_subordinators(beta, 0.1, 30, 100_000, np.random.default_rng(1))[:, -1]  # S_3
    b = ctrw.simulate_subordinators(beta, 0.1, 10, 100_000, np.random.default_rng(2))[:, -1]  # S_1
    assert ks_2samp(a, c ** (1 / beta) * b).pvalue > 0.01


def test_subordinator_near_one_concentrates():
    S = ctrw.simulate_subordinators(0.99, 0.01, 100, 20000, np.random.default_rng(3))[:, -1]
    assert S.var() < 0.05 * ctrw.simulate_subordinators(0.7, 0.01, 100, 20000, np.random.default_rng(3))[:, -1].var()


def test_inverse_subordinator_properties(rng):
    grid = np.linspace(0.0, 5.0, 501)
    path = ctrw.simulate_subordinator(0.7, grid, rng)
    assert path.values[0] == 0 and np.all(np.diff(path.values) >= 0)
    assert ctrw.inverse_subordinator(path, 0.0) == 0.0
    ts = np.linspace(0.0, 0.99 * path.values[-1], 200)
    sig = np.array([ctrw.inverse_subordinator(path, t) for t in ts])
    assert np.all(np.diff(sig) >= 0)
    # sigma(S_s) >= s on grid points
    for s_, S_ in zip(grid[:-1], path.values[:-1]):
        assert ctrw.inverse_subordinator(path, S_) >= s_ - 1e-12
    with pytest.raises(RangeError):
        ctrw.inverse_subordinator(path, path.values[-1] + 1.0)


def test_inverse_mean_consistent_under_refinement():
    beta, t, n = 0.7, 1.0, 4000

    def sigmas(dt, seed):
        r = np.random.default_rng(seed)
        grid = np.arange(0.0, 60.0 + dt / 2, dt)
        out = []
        for _ in range(n):
            p = ctrw.simulate_subordinator(beta, grid, r)
            assert p.values[-1] > t  # fails with negligible probability on this long grid
            out.append(ctrw.inverse_subordinator(p, t))
        return np.array(out)

    a, b = sigmas(0.04, 1), sigmas(0.01, 2)
    se = np.sqrt(a.var() / n + b.var() / n)
    assert abs(a.mean() - b.mean()) < 3 * se + 0.04  # grid bias at most one coarse cell


def test_inverse_marginal_mean():
    beta, t = 0.7, 1.0
    sig = ctrw.inverse_marginal(beta, np.array([t]), ctrw.sample_stable(beta, np.random.default_rng(5), 200_000))[0]
    exact = t**beta / gamma(1 + beta)
    assert abs(sig.mean() - exact) < 3 * sig.std() / np.sqrt(sig.size)


def test_ctrw_counts_converge_to_inverse_subordinator():
    beta, t, n = 0.7, 1.0, 20000
    ref = ctrw.inverse_marginal(beta, np.array([t]), ctrw.sample_stable(beta, np.random.default_rng(1), n))[0]
    ks = [ks_2samp(h * ctrw.ctrw_counts(ctrw.ctrw_waiting_law(beta, h), t, n, np.random.default_rng(2)), ref).statistic
          for h in (1e-1, 1e-2, 1e-3)]
    assert ks[0] > ks[1] > ks[2]


def test_exponential_counts_are_poisson():
    N = ctrw.ctrw_counts(ctrw.WaitingLaw.exponential(20.0), 1.0, 50000, np.random.default_rng(4))
    assert abs(N.mean() - 20.0) < 3 * np.sqrt(20.0 / N.size)


# -- Caputo operators


def test_caputo_constant_is_exactly_zero():
    grid = np.linspace(0, 1, 101)
    for beta in (0.3, 0.5, 0.9, 1.0):
        out = ctrw.caputo_derivative(ctrw.TimeSeries(grid, np.full(101, 2.7)), beta)
        assert np.all(out.values == 0.0)


def test_caputo_of_identity():
    grid = np.linspace(0, 1, 1001)
    out = ctrw.caputo_derivative(ctrw.TimeSeries(grid, grid), 0.5)
    ref = out.grid**0.5 / gamma(1.5)
    m = out.grid >= 0.1
    assert np.max(np.abs(out.values[m] / ref[m] - 1)) < 1e-3


def test_caputo_quadrature_oracle():
    from scipy.integrate import quad
    beta = 0.4
    grid = np.linspace(0, 1, 2001)
    out = ctrw.caputo_derivative(ctrw.TimeSeries(grid, np.sin(3 * grid)), beta)
    for t in (0.25, 0.5, 1.0):
        ref = quad(lambda s: 3 * np.cos(3 * s) * (t - s) ** (-beta), 0, t, weight=None, limit=200)[0] / gamma(1 - beta)
        i = np.argmin(np.abs(out.grid - t))
        assert abs(out.values[i] - ref) < 2e-3 * abs(ref)


def test_caputo_near_one_is_derivative():
    grid = np.linspace(0, 1, 1001)
    f = np.sin(2 * grid) + grid**2
    out = ctrw.caputo_derivative(ctrw.TimeSeries(grid, f), 0.999)
    fd = np.diff(f) / np.diff(grid)
    m = out.grid >= 0.1
    assert np.max(np.abs(out.values[m] - fd[m])) < 1e-2
    exact = ctrw.caputo_derivative(ctrw.TimeSeries(grid, f), 1.0)
    assert np.allclose(exact.values, fd, atol=1e-12)


def test_caputo_rejects_nonuniform_grid():
    with pytest.raises(ValidationError):
        ctrw.TimeSeries(np.array([0.0, 0.1, 0.3]), np.zeros(3))


def test_mixed_caputo_constant_and_single_component():
    grid = np.linspace(0, 1, 401)
    beta = 0.6
    law = ctrw.WaitingLaw.mixture([(1.0, beta)])
    assert np.all(ctrw.mixed_caputo(ctrw.TimeSeries(grid, np.ones(401)), law).values == 0.0)
    f = ctrw.TimeSeries(grid, np.exp(-grid) * np.cos(4 * grid))
    lhs = ctrw.mixed_caputo(f, law).values
    rhs = -(gamma(1 - beta) / beta) * ctrw.caputo_derivative(f, beta).values
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


def test_mixed_caputo_linear_closed_form():
    beta = 0.35
    grid = np.linspace(0, 2, 201)
    out = ctrw.mixed_caputo(ctrw.TimeSeries(grid, grid), ctrw.WaitingLaw.mixture([(1.0, beta)]))
    ref = -out.grid ** (1 - beta) / (beta * (1 - beta))
    assert np.allclose(out.values, ref, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(w=st.floats(0.05, 0.95), b1=st.floats(0.1, 0.9), b2=st.floats(0.1, 0.9))
def test_mixed_caputo_linear_in_measure(w, b1, b2):
    grid = np.linspace(0, 1, 201)
    f = ctrw.TimeSeries(grid, np.sin(5 * grid) + grid)
    two = ctrw.mixed_caputo(f, ctrw.WaitingLaw.mixture([(w, b1), (1 - w, b2)])).values
    one = (w * ctrw.mixed_caputo(f, ctrw.WaitingLaw.mixture([(1.0, b1)])).values
           + (1 - w) * ctrw.mixed_caputo(f, ctrw.WaitingLaw.mixture([(1.0, b2)])).values)
    assert np.max(np.abs(two - one)) <= 1e-10 * max(1.0, np.max(np.abs(one)))


# -- subordinated expectation


def test_subordinated_constant_observable():
    grid = np.linspace(0, 1, 11)
    one = ObservablePolynomial.constant(1.0, 2)
    res = ctrw.subordinated_expectation(one, KET0, SPEC, 0.7, grid, 200, rng=1, with_generator=True)
    assert np.allclose(res.series.values, 1.0) and np.allclose(res.generator.values, 0.0)
    rep = ctrw.verify_fractional_equation(res.series, res.generator, 0.7)
    assert np.allclose(rep.lhs, 0) and np.allclose(rep.rhs, 0) and rep.relative_sup == 0.0


def test_near_markov_matches_markov():
    grid = np.linspace(0, 1, 6)
    f = ObservablePolynomial.linear(SZ)
    a = ctrw.subordinated_expectation(f, KET0, SPEC, 0.99, grid, 4000, rng=3).series
    b = ctrw.subordinated_expectation(f, KET0, SPEC, None, grid, 4000, rng=4).series
    se = np.sqrt(a.stderr**2 + b.stderr**2)
    assert np.all(np.abs(a.values - b.values) <= 3 * se + 1e-12)


def test_markov_case_matches_lindblad():
    grid = np.linspace(0, 1, 6)
    f = ObservablePolynomial.linear(SZ)
    res = ctrw.subordinated_expectation(f, KET0, SPEC, None, grid, 4000, rng=5).series
    ref = [f(r) for r in q.lindblad_evolve(KET0, SPEC.A, SPEC.Cs, grid)]
    assert np.all(np.abs(res.values - ref) <= 3 * res.stderr + 1e-12)


def test_exact_inner_matches_sde_inner():
    grid = np.linspace(0, 1, 6)
    f = ObservablePolynomial.linear(SZ)
    a = ctrw.subordinated_expectation(f, KET0, SPEC, 0.7, grid, 4000, rng=6).series
    b = ctrw.subordinated_expectation(f, KET0, SPEC, 0.7, grid, 4000, rng=7, inner="exact").series
    se = np.sqrt(a.stderr**2 + b.stderr**2)
    assert np.all(np.abs(a.values - b.values) <= 3 * se + 1e-12)
    assert np.all(b.stderr[1:] < a.stderr[1:])
    with pytest.raises(ValidationError):
        ctrw.subordinated_expectation(ObservablePolynomial.power(SZ, 2), KET0, SPEC, 0.7, grid, 10, inner="exact")


@pytest.mark.slow
def test_subordinated_matches_ctrw_chain():
    # h = 1e-2 is still visibly pre-asymptotic (about 6 SE off); 1e-3 is not
    beta, h, t, n = 0.7, 1e-3, 1.0, 10000
    f = ObservablePolynomial.linear(SZ)
    rng = np.random.default_rng(8)
    N = ctrw.ctrw_counts(ctrw.ctrw_waiting_law(beta, h), t, n, rng)
    final = run_chain_batch(KET0, SPEC.hamiltonian_spec(), h, N, rng)
    chain_vals = f(final)
    sub = ctrw.subordinated_expectation(f, KET0, SPEC, beta, np.array([0.0, t]), n, rng=9, inner="exact").series
    se = np.sqrt(chain_vals.var() / n + sub.stderr[-1] ** 2)
    assert abs(chain_vals.mean() - sub.values[-1]) < 3 * se


def test_path_coupling_matches_scaling_coupling():
    grid = np.linspace(0, 1, 6)
    f = ObservablePolynomial.linear(SZ)
    a = ctrw.subordinated_expectation(f, KET0, SPEC, 0.7, grid, 3000, rng=10, inner="exact").series
    b = ctrw.subordinated_expectation(f, KET0, SPEC, 0.7, grid, 3000, rng=11, inner="exact", coupling="path",
                                      sub_dt=1e-3).series
    se = np.sqrt(a.stderr**2 + b.stderr**2)
    assert np.all(np.abs(a.values - b.values) <= 3 * se + 2e-3)


def test_residual_budget_report():
    f = ObservablePolynomial.linear(SZ)
    grid = np.linspace(0, 1, 21)
    rep = ctrw.fractional_residual_budget(f, KET0, SPEC, 0.7, grid, 20000, rng=12, inner="exact")
    assert rep.budget.shape == rep.residual.shape == rep.grid.shape
    assert np.all(rep.budget > 0)
    assert rep.extra["within_budget"] == bool(np.all(np.abs(rep.residual) <= rep.budget))
    assert rep.extra["within_budget"]
    header = rep.to_csv().splitlines()[0]
    assert header == "t,caputo,generator,residual,budget"
    assert "relative_sup" in rep.to_json()
