import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracfilter import generators as g
from fracfilter import qstate as q
from fracfilter.sde import SdeConfig, run_ensemble
from conftest import SM, SX, SY, SZ, KET0, random_matrix, loglog_slope

ZERO = np.zeros((2, 2), complex)


def lindblad_pairing(B, rho, A, Cs):
    return np.trace(B @ q.lindblad_rhs(rho, A, Cs)).real


def quad_f():
    return g.ObservablePolynomial([SZ, SX], c0=0.1, linear=[0.3, 0.2], quadratic=[[1.0, 0.5], [0.5, 0.4]])


def cubic_f():
    T = np.zeros((3, 3, 3))
    T[0, 1, 2] = 0.7
    T[2, 2, 2] = -0.3
    return g.ObservablePolynomial([SX, SY, SZ], linear=[0.1, 0.0, -0.4], quadratic=np.eye(3) * 0.2, cubic=T)


def test_eval_count_hand_example():
    f = g.ObservablePolynomial.linear(SZ)
    assert np.isclose(g.eval_count(f, KET0, ZERO, SM), -2.0)


def test_zero_intensity_jump_term():
    # C rho C* = 0: only the drift survives
    f = quad_f()
    rho = np.diag([0.0, 1.0]).astype(complex)
    val = g.eval_count(f, rho, ZERO, SM)
    assert np.isfinite(val)
    assert np.isclose(val, 0.0, atol=1e-14)


@pytest.mark.parametrize("fn", [g.eval_count, g.eval_dif])
def test_constants_are_killed(fn, rng):
    one = g.ObservablePolynomial.constant(1.0, 2)
    for _ in range(10):
        rho = q.random_density_matrix(2, rng)
        assert fn(one, rho, q.random_hermitian(2, rng), random_matrix(rng)) == 0.0


def test_trace_function_is_killed(rng):
    tr = g.ObservablePolynomial.linear(np.eye(2))
    rho = q.random_density_matrix(2, rng)
    A, C = q.random_hermitian(2, rng), random_matrix(rng)
    assert abs(g.eval_count(tr, rho, A, C)) < 1e-13
    assert abs(g.eval_dif(tr, rho, A, C)) < 1e-13
    spec = g.GeneratorSpec(A, ((C, 0.0), (random_matrix(rng), 0.3)))
    assert g.eval_mix(g.ObservablePolynomial.constant(2.0, 2), rho, spec) == 0.0


def test_linear_lindblad_consistency_random(rng):
    for _ in range(100):
        n = int(rng.integers(2, 4))
        rho = q.random_density_matrix(n, rng)
        A, C, B = q.random_hermitian(n, rng), random_matrix(rng, n), q.random_hermitian(n, rng)
        f = g.ObservablePolynomial.linear(B)
        ref = lindblad_pairing(B, rho, A, [C])
        tol = 1e-9 * max(1.0, abs(ref))
        assert abs(g.eval_count(f, rho, A, C) - ref) < tol
        assert abs(g.eval_dif(f, rho, A, C) - ref) < tol
        assert abs(g.eval_mix(f, rho, g.GeneratorSpec(A, ((C, 0.0),))) - ref) < tol
        assert abs(g.eval_mix(f, rho, g.GeneratorSpec(A, ((C, 0.7),))) - ref) < tol


def test_multichannel_linear(rng):
    rho = q.random_density_matrix(2, rng)
    A, B = q.random_hermitian(2, rng), q.random_hermitian(2, rng)
    Cs = [random_matrix(rng), random_matrix(rng)]
    spec = g.GeneratorSpec(A, ((Cs[0], 0.0), (Cs[1], np.pi / 3)))
    assert np.isclose(g.eval_mix(g.ObservablePolynomial.linear(B), rho, spec), lindblad_pairing(B, rho, A, Cs))


def test_eval_mix_reductions(rng):
    f = quad_f()
    rho = q.random_density_matrix(2, rng)
    A, C1, C2 = q.random_hermitian(2, rng), random_matrix(rng), random_matrix(rng)
    assert np.isclose(g.eval_mix(f, rho, g.GeneratorSpec(A, ((C1, 0.5),))), g.eval_dif(f, rho, A, C1))
    assert np.isclose(g.eval_mix(f, rho, g.GeneratorSpec(A, ((C1, 0.0),))), g.eval_count(f, rho, A, C1))
    # all counting: commutator once plus per-channel dissipative parts
    both = g.eval_mix(f, rho, g.GeneratorSpec(A, ((C1, 0.0), (C2, 0.0))))
    parts = g.eval_count(f, rho, A, C1) + g.eval_count(f, rho, ZERO, C2)
    assert np.isclose(both, parts)


def _fd_first(f, rho, X, eps=1e-5):
    return (f(rho + eps * X) - f(rho - eps * X)) / (2 * eps)


def _fd_second(f, rho, X, eps=1e-4):
    return (f(rho + eps * X) - 2 * f(rho) + f(rho - eps * X)) / eps**2


@pytest.mark.parametrize("make", [quad_f, cubic_f])
def test_gradient_and_hessian_vs_finite_differences(make, rng):
    f = make()
    n = f.dim
    for _ in range(10):
        rho = q.random_density_matrix(n, rng)
        X = q.random_hermitian(n, rng)
        d1 = f.gradient_pairing(rho, X)
        d2 = f.hessian_form(rho, X)
        assert abs(d1 - _fd_first(f, rho, X)) <= 1e-6 * max(1.0, abs(d1))
        assert abs(d2 - _fd_second(f, rho, X)) <= 1e-5 * max(1.0, abs(d2))


def test_eval_dif_against_finite_difference_oracle(rng):
    f = g.ObservablePolynomial.power(SZ, 2)
    for _ in range(5):
        rho = q.random_density_matrix(2, rng)
        A, C = q.random_hermitian(2, rng), random_matrix(rng)
        Y = rho @ C.conj().T + C @ rho
        X = Y - np.trace(Y).real * rho
        drift = -1j * (A @ rho - rho @ A) - 0.5 * (C.conj().T @ C @ rho + rho @ C.conj().T @ C) + C @ rho @ C.conj().T
        ref = 0.5 * _fd_second(f, rho, X) + _fd_first(f, rho, drift)
        assert abs(g.eval_dif(f, rho, A, C) - ref) < 1e-5
        # closed form of the second-order part for tr(sz rho)^2
        assert np.isclose(0.5 * f.hessian_form(rho, X), np.trace(SZ @ X).real ** 2)


def test_residual_no_interaction_is_first_order():
    spec = g.GeneratorSpec(0.7 * SX + 0.2 * SZ, ((ZERO, 0.0),))
    f = g.ObservablePolynomial.linear(SZ)
    states = q.probe_states(2)
    hs = np.array([1e-2, 1e-3, 1e-4])
    res = [g.empirical_generator_residual(f, spec, h, states) for h in hs]
    assert 0.9 < loglog_slope(hs, res) < 1.1


def test_counting_residual_slope():
    spec = g.GeneratorSpec(0.5 * SZ, ((SM, 0.0),))
    f = quad_f()
    states = q.probe_states(2)
    hs = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    res = [g.empirical_generator_residual(f, spec, h, states) for h in hs]
    assert g.fit_loglog_slope(hs, res) >= 0.45


def test_empirical_generator_is_difference_quotient():
    from fracfilter.chain import transition_operator
    spec = g.GeneratorSpec(0.5 * SZ, ((SM, np.pi / 4),))
    f = quad_f()
    states = q.probe_states(2)[:4]
    h = 1e-3
    emp = g.empirical_generator(f, spec, h, states)
    ref = [(transition_operator(f, r, spec.hamiltonian_spec(), h) - f(r)) / h for r in states]
    assert np.allclose(emp, ref)


def test_semigroup_reference_at_zero_is_identity():
    spec = g.GeneratorSpec(0.5 * SZ, ((SM, 0.0),))
    f = quad_f()
    states = q.probe_states(2)[:5]
    assert np.allclose(g.semigroup_reference(f, spec, 0.0, states), [f(r) for r in states])


def test_semigroup_reference_linear_matches_lindblad():
    spec = g.GeneratorSpec(0.5 * SZ, ((SM, 0.0),))
    f = g.ObservablePolynomial.linear(SX + SZ)
    states = q.probe_states(2)[:5]
    got = g.semigroup_reference(f, spec, 0.5, states)
    ref = [f(q.lindblad_evolve(r, spec.A, spec.Cs, [0.5])[-1]) for r in states]
    assert np.allclose(got, ref, atol=1e-10)


def test_semigroup_reference_linear_matches_sde_mean():
    spec = g.GeneratorSpec(0.5 * SZ + 0.3 * SX, ((SM, 0.0),))
    f = g.ObservablePolynomial.linear(SZ)
    rho0 = np.array([[0.5, 0.5], [0.5, 0.5]], complex)
    ref = g.semigroup_reference(f, spec, 0.5, [rho0])[0]
    summ = run_ensemble(rho0, SdeConfig(spec, 1e-3), 0.5, 4000, {"z": SZ}, n_checkpoints=1, seed=11)
    assert abs(summ.means[0, -1] - ref) < 3 * summ.stderr[0, -1]


def test_chain_semigroup_converges():
    spec = g.GeneratorSpec(0.5 * SZ, ((SM, 0.0),))
    f = quad_f()
    states = q.probe_states(2)[:6]
    ref = g.semigroup_reference(f, spec, 0.5, states)
    errs = [np.abs(g.chain_semigroup(f, spec, h, 0.5, states) - ref).max() for h in (2.0**-5, 2.0**-8)]
    assert errs[1] < errs[0]


def test_residual_csv():
    spec = g.GeneratorSpec(0.5 * SZ, ((SM, 0.0),))
    text = g.residual_csv([0.1, 0.01], [0.2, 0.05], spec)
    rows = text.strip().splitlines()
    assert rows[0] == "h,residual,channel_config_hash"
    assert rows[1].endswith(spec.config_hash()) and len(rows) == 3


def test_generator_spec_validation():
    from fracfilter._validation import ValidationError
    with pytest.raises(ValidationError):
        g.GeneratorSpec(random_matrix(np.random.default_rng(0)), ())
    with pytest.raises(ValidationError):
        g.GeneratorSpec(SZ, ((np.eye(3), 0.0),))
    spec = g.GeneratorSpec(SZ, ((SM, 0.0), (SM, 0.3)))
    assert spec.counting == [0] and spec.dim == 2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_heisenberg_linear_evolution(seed):
    r = np.random.default_rng(seed)
    A, C, B = q.random_hermitian(2, r), random_matrix(r), q.random_hermitian(2, r)
    rho = q.random_density_matrix(2, r)
    f = g.ObservablePolynomial.linear(B)
    fs = f.heisenberg(A, [C], 0.4)
    assert np.isclose(fs(rho), f(q.lindblad_evolve(rho, A, [C], [0.4])[-1]), atol=1e-10)


def test_poisson_semigroup_linear_routes_agree():
    # degree-1 f: the average-channel exponential equals the enumerated Poisson mixture
    spec = g.GeneratorSpec(0.5 * SX, ((SM, 0.0),))
    f = g.ObservablePolynomial([SZ, SX], c0=0.2, linear=[1.0, 0.5])
    states = np.stack(q.probe_states(2)[:5])
    a = g.poisson_semigroup(f, spec, 0.05, 0.5, states)
    from fracfilter.chain import iterate_transition
    import scipy.stats
    w = scipy.stats.poisson.pmf(np.arange(200), 10.0)
    b = iterate_transition(f, states, spec.hamiltonian_spec(), 0.05, 199, step_weights=w / w.sum())
    assert np.allclose(a, b, atol=1e-10)


def test_poisson_semigroup_constant_and_rate():
    spec = g.GeneratorSpec(0.5 * SX, ((SM, 0.0),))
    states = np.stack(q.probe_states(2)[:6])
    one = g.ObservablePolynomial([np.eye(2)], quadratic=[[1.0]])  # tr(rho)^2, degree 2, enumerated
    assert np.allclose(g.poisson_semigroup(one, spec, 0.05, 0.5, states), 1.0)
    f = quad_f()
    ref = g.semigroup_reference(f, spec, 0.5, states)
    lams = np.array([2.0**-4, 2.0**-6, 2.0**-8])
    errs = [np.abs(g.poisson_semigroup(f, spec, lam, 0.5, states) - ref).max() for lam in lams]
    assert loglog_slope(lams, errs) >= 0.45
