import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from fracfilter import chain as c
from fracfilter import qstate as q
from fracfilter.ctrw import WaitingLaw, ctrw_counts
from fracfilter.generators import GeneratorSpec, ObservablePolynomial, eval_mix
from conftest import SM, SX, SZ, KET0, KET1, random_matrix, loglog_slope

ZERO = np.zeros((2, 2), complex)


def counting_spec(A=ZERO, C=SM):
    return c.HamiltonianSpec(A, (c.ChannelSpec(C, 0.0),))


def test_decoupled_probe_single_outcome(rng):
    rho = q.random_density_matrix(2, rng)
    A = q.random_hermitian(2, rng)
    t = 0.05
    out = c.step_exact(rho, counting_spec(A, ZERO), t)
    assert len(out) == 1 and np.isclose(out.probs[0], 1.0)
    assert np.allclose(out.states[0], q.conjugate_by_evolution(rho, A, t), atol=1e-12)


def test_hand_example_jump_probability():
    errs = []
    ts = np.array([1e-2, 1e-3, 1e-4])
    for t in ts:
        out = c.step_exact(KET0, counting_spec(), t)
        i = out.words.index((1,))
        errs.append(abs(out.probs[i] - t))
        assert np.allclose(out.states[i], KET1, atol=1e-12)
    assert loglog_slope(ts, errs) > 1.9


def test_two_probe_double_click_is_second_order():
    spec = c.HamiltonianSpec(ZERO, (c.ChannelSpec(SM, 0.0), c.ChannelSpec(0.5 * SX, 0.0)))
    rho = np.eye(2) / 2
    ts = np.array([1e-2, 1e-3, 1e-4])
    p11 = []
    for t in ts:
        out = c.step_exact(rho, spec, t)
        p11.append(dict(zip(out.words, out.probs)).get((1, 1), 0.0))
    assert max(p11) < 1e-3
    assert loglog_slope(ts, p11) > 1.9


def test_asymptotic_diagonal_probabilities(rng):
    rho = q.random_density_matrix(2, rng)
    C = random_matrix(rng)
    t = 1e-3
    T = np.trace(C.conj().T @ C @ rho).real
    out = c.step_asymptotic(rho, counting_spec(q.random_hermitian(2, rng), C), t)
    assert np.allclose(out.probs, [1 - t * T, t * T])


def test_asymptotic_rotated_probability(rng):
    rho = q.random_density_matrix(2, rng)
    C = random_matrix(rng, scale=0.5)
    phi, t = 0.4, 1e-3
    T = np.trace(C.conj().T @ C @ rho).real
    cross = np.trace(rho @ C.conj().T + C @ rho).real
    p1 = np.cos(phi) ** 2 * (1 - t * T) + np.sqrt(t) * np.sin(phi) * np.cos(phi) * cross + t * T * np.sin(phi) ** 2
    out = c.step_asymptotic(rho, c.HamiltonianSpec(ZERO, ((C, phi),)), t)
    assert np.isclose(out.probs[out.words.index((0,))], p1)


@pytest.mark.parametrize("phi", [0.0, np.pi / 4, np.pi / 6])
def test_asymptotic_close_to_exact(phi, rng):
    rho = q.random_density_matrix(2, rng)
    spec = c.HamiltonianSpec(q.random_hermitian(2, rng), ((random_matrix(rng, scale=0.5), phi),))
    ts = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    tv = []
    for t in ts:
        a = c.step_asymptotic(rho, spec, t)
        e = c.step_exact(rho, spec, t)
        pa = dict(zip(a.words, a.probs))
        pe = dict(zip(e.words, e.probs))
        tv.append(0.5 * sum(abs(pa.get(w, 0) - pe.get(w, 0)) for w in set(pa) | set(pe)))
    assert loglog_slope(ts, tv) >= 1.4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), K=st.integers(1, 2), n=st.integers(2, 3),
       logt=st.floats(-6, -1), phi=st.floats(0, np.pi))
def test_outcome_distribution_invariants(seed, K, n, logt, phi):
    r = np.random.default_rng(seed)
    spec = c.HamiltonianSpec(q.random_hermitian(n, r), tuple((random_matrix(r, n), phi) for _ in range(K)))
    out = c.step_exact(q.random_density_matrix(n, r), spec, 10**logt)
    assert abs(out.probs.sum() - 1) < 1e-10
    for s in out.states:
        assert np.abs(s - s.conj().T).max() < 1e-12
        assert abs(np.trace(s) - 1) < 1e-12
        assert np.linalg.eigvalsh(s).min() > -1e-10


def test_second_outcome_is_jump_target(rng):
    rho = q.random_density_matrix(2, rng)
    C = random_matrix(rng)
    target = C @ rho @ C.conj().T
    target /= np.trace(target)
    ts = np.array([1e-2, 1e-3, 1e-4])
    errs = []
    for t in ts:
        out = c.step_exact(rho, counting_spec(q.random_hermitian(2, rng), C), t)
        errs.append(np.abs(out.states[out.words.index((1,))] - target).max())
    assert loglog_slope(ts, errs) > 0.9


def test_transition_operator_constant_and_unitary(rng):
    rho = q.random_density_matrix(2, rng)
    A = q.random_hermitian(2, rng)
    one = ObservablePolynomial.constant(1.0, 2)
    assert np.isclose(c.transition_operator(one, rho, counting_spec(A, random_matrix(rng)), 0.01), 1.0)
    f = ObservablePolynomial.linear(SZ)
    t = 0.3
    expected = np.trace(SZ @ q.conjugate_by_evolution(rho, A, t)).real
    assert np.isclose(c.transition_operator(f, rho, counting_spec(A, ZERO), t), expected)


@pytest.mark.parametrize("phi", [0.0, np.pi / 4])
def test_transition_operator_generator_expansion(phi, rng):
    rho = q.random_density_matrix(2, rng)
    gspec = GeneratorSpec(q.random_hermitian(2, rng), ((random_matrix(rng, scale=0.6), phi),))
    f = ObservablePolynomial([SZ, SX], linear=[0.3, -0.2], quadratic=[[1.0, 0.4], [0.4, 0.5]])
    hs = np.array([1e-2, 1e-3, 1e-4])
    lf = eval_mix(f, rho, gspec)
    errs = [abs(c.transition_operator(f, rho, gspec.hamiltonian_spec(), h) - f(rho) - h * lf) for h in hs]
    assert loglog_slope(hs, errs) >= 1.4


def test_iterate_transition_matches_recursion(rng):
    spec = counting_spec(q.random_hermitian(2, rng), SM)
    f = ObservablePolynomial.power(SZ, 2)
    rho = q.random_density_matrix(2, rng)
    t = 0.05

    def rec(r, k):
        if k == 0:
            return f(r)
        out = c.step_exact(r, spec, t)
        return sum(p * rec(s, k - 1) for p, s in zip(out.probs, out.states))

    got = c.iterate_transition(f, rho[None], spec, t, 3)[0]
    assert np.isclose(got, rec(rho, 3), atol=1e-12)


def test_zeno_error_decreases(rng):
    spec = counting_spec(q.random_hermitian(2, rng), SM)
    rho = q.random_density_matrix(2, rng)
    errs = [c.zeno_error(SZ, rho, spec, 0.5, t) for t in (1e-2, 1e-3, 1e-4)]
    assert errs[0] > errs[1] > errs[2]


def test_trajectory_degenerate_law():
    h = 0.01
    rec = c.sample_trajectory(KET0, counting_spec(), WaitingLaw.degenerate(h), 10 * h, rng_seed=1)
    assert len(rec.times) == 11 and len(rec.states) == 11
    assert np.all(np.diff(rec.times) > 0) and rec.times[0] == 0


def test_trajectory_exponential_mean_count():
    h, s = 0.05, 1.0
    spec = counting_spec(0.5 * SZ, 0.5 * SM)
    counts = [len(c.sample_trajectory(np.eye(2) / 2, spec, WaitingLaw.exponential(1 / h), s, rng_seed=k).waits)
              for k in range(400)]
    se = np.std(counts, ddof=1) / np.sqrt(len(counts))
    assert abs(np.mean(counts) - s / h) < 3 * se


def test_trajectory_stable_counts_match_ctrw_counts():
    beta, h, t = 0.7, 0.05, 1.0
    law = WaitingLaw.stable_tail(beta, scale=h)
    spec = counting_spec(0.5 * SZ, 0.5 * SM)
    chain_counts = [len(c.sample_trajectory(np.eye(2) / 2, spec, law, t, rng_seed=k, h=h).waits)
                    for k in range(400)]
    ref = ctrw_counts(law, t, 20000, rng=np.random.default_rng(9))
    assert ks_2samp(chain_counts, ref).pvalue > 0.01


def test_trajectory_record_round_trip():
    rec = c.sample_trajectory(np.eye(2) / 2, counting_spec(0.5 * SZ, SM), WaitingLaw.exponential(20.0), 0.5,
                              rng_seed=3, h=0.05)
    back = c.TrajectoryRecord.from_json(rec.to_json())
    assert np.allclose(back.times, rec.times) and np.allclose(back.states, rec.states)
    assert [tuple(o) for o in back.outcomes] == [tuple(o) for o in rec.outcomes]
    mid = 0.5 * (rec.times[1] + rec.times[2]) if len(rec.times) > 2 else rec.times[-1]
    assert np.allclose(rec.state_at(mid), rec.states[np.searchsorted(rec.times, mid, side="right") - 1])
    lines = rec.to_csv().splitlines()
    assert lines[0].startswith("step,time,outcome_word") and len(lines) == len(rec.times) + 1


def test_trajectory_reproducible():
    law = WaitingLaw.exponential(10.0)
    a = c.sample_trajectory(KET0, counting_spec(), law, 1.0, rng_seed=5, h=0.1)
    b = c.sample_trajectory(KET0, counting_spec(), law, 1.0, rng_seed=5, h=0.1)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.states, b.states)


def test_iterate_transition_step_weights(rng):
    spec = counting_spec(q.random_hermitian(2, rng), SM)
    f = ObservablePolynomial.power(SZ, 2)
    rhos = np.stack([q.random_density_matrix(2, rng) for _ in range(3)])
    w = np.array([0.1, 0.2, 0.3, 0.4])
    mixed = c.iterate_transition(f, rhos, spec, 0.05, 3, step_weights=w)
    ref = sum(wk * c.iterate_transition(f, rhos, spec, 0.05, k) for k, wk in enumerate(w))
    assert np.allclose(mixed, ref, atol=1e-12)
    with pytest.raises(Exception):
        c.iterate_transition(f, rhos, spec, 0.05, 3, step_weights=w[:2])
