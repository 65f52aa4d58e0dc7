"""Limiting generators of the measurement chains and convergence diagnostics.

Test functions are polynomials of degree at most 3 in trace coordinates
``z_i = tr(B_i rho)``; their gradient pairing ``(f'(rho), X)`` and Hessian
form ``[X f''(rho) X]`` are exact.

Generators (with ``T = tr(C^* C rho)`` and ``omega = tr(rho C^* + C rho)``):

* counting:  ``-(f', i[A,rho] + 1/2{C^*C,rho} - T rho) + T [f(C rho C^*/T) - f(rho)]``
* diffusive: ``1/2 [D f'' D] + (f', -i[A,rho] - 1/2{C^*C,rho} + C rho C^*)``
  with ``D = rho C^* + C rho - omega rho``
* mixed: the channel terms summed, sharing one ``-(f', i[A,rho])``.
"""

import csv
import hashlib
import io
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.stats

from ._validation import SizingError, ValidationError, as_matrix, check_hermitian, dag
from .chain import (
    HamiltonianSpec,
    as_channel,
    average_channel_superoperator,
    batch_outcomes,
    iterate_transition,
)
from .qstate import heisenberg_observable

JUMP_TOL = 1e-14


class ObservablePolynomial:
    """``f(rho) = c0 + b.z + z^T Q z + T(z, z, z)`` with ``z_i = tr(B_i rho)``.

    Parameters
    ----------
    basis : sequence of (n, n) Hermitian arrays
    c0 : float
    linear : (m,) array, optional
    quadratic : (m, m) array, optional (symmetrized)
    cubic : (m, m, m) array, optional (symmetrized)

    Calling the object on a stack of matrices evaluates it elementwise.
    """

    def __init__(self, basis, c0=0.0, linear=None, quadratic=None, cubic=None):
        basis = [check_hermitian(B, f"basis[{i}]") for i, B in enumerate(basis)]
        if not basis:
            raise ValidationError("basis must contain at least one matrix")
        self.basis = np.array(basis)
        m = len(basis)
        self.c0 = float(c0)
        self.b = np.zeros(m) if linear is None else np.asarray(linear, dtype=float).reshape(m)
        Q = np.zeros((m, m)) if quadratic is None else np.asarray(quadratic, dtype=float).reshape(m, m)
        self.Q = 0.5 * (Q + Q.T)
        T = np.zeros((m, m, m)) if cubic is None else np.asarray(cubic, dtype=float).reshape(m, m, m)
        perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
        self.T = sum(np.transpose(T, p) for p in perms) / 6.0

    @classmethod
    def constant(cls, c, n):
        return cls([np.eye(n)], c0=c)

    @classmethod
    def linear(cls, B, c0=0.0):
        return cls([B], c0=c0, linear=[1.0])

    @classmethod
    def power(cls, B, k):
        """``tr(B rho)**k`` for ``k <= 3``."""
        coef = np.zeros((1,) * k) if k else None
        if k == 0:
            return cls([B], c0=1.0)
        coef.flat[0] = 1.0
        return cls([B], **{1: {"linear": coef}, 2: {"quadratic": coef}, 3: {"cubic": coef}}[k])

    @property
    def dim(self):
        return self.basis.shape[-1]

    @property
    def degree(self):
        if np.any(self.T):
            return 3
        if np.any(self.Q):
            return 2
        return 1 if np.any(self.b) else 0

    def coords(self, X):
        """``tr(B_i X)``; real part for Hermitian ``X``."""
        return np.real(np.einsum("kij,...ji->...k", self.basis, X))

    def _g(self, z):
        return (
            self.c0
            + z @ self.b
            + np.einsum("...i,ij,...j->...", z, self.Q, z)
            + np.einsum("...i,ijk,...j,...k->...", z, self.T, z, z)
        )

    def __call__(self, rho):
        return self._g(self.coords(rho))

    def grad_coeffs(self, rho):
        z = self.coords(rho)
        return self.b + 2 * z @ self.Q + 3 * np.einsum("ijk,...j,...k->...i", self.T, z, z)

    def hess_coeffs(self, rho):
        z = self.coords(rho)
        return 2 * self.Q + 6 * np.einsum("ijk,...k->...ij", self.T, z)

    def gradient_matrix(self, rho):
        """Hermitian ``G`` with ``(f'(rho), X) = tr(G X)``."""
        return np.einsum("...k,kij->...ij", self.grad_coeffs(rho), self.basis)

    def gradient_pairing(self, rho, X):
        return np.einsum("...k,...k->...", self.grad_coeffs(rho), self.coords(X))

    def hessian_form(self, rho, X):
        x = self.coords(X)
        return np.einsum("...i,...ij,...j->...", x, self.hess_coeffs(rho), x)

    def heisenberg(self, A, Cs, s):
        """For degree <= 1 only: the exactly evolved function ``T_s f``."""
        if self.degree > 1:
            raise ValidationError("exact Heisenberg evolution needs a linear test function")
        Bs = [heisenberg_observable(B, A, Cs, s) for B in self.basis]
        Bs = [0.5 * (B + dag(B)) for B in Bs]
        return ObservablePolynomial(Bs, c0=self.c0, linear=self.b)


@dataclass(frozen=True)
class GeneratorSpec:
    """Hamiltonian ``A`` and channels; counting channels form the set I."""

    A: np.ndarray
    channels: tuple = ()

    def __post_init__(self):
        A = check_hermitian(self.A, "A")
        chans = tuple(as_channel(c) for c in self.channels)
        for j, c in enumerate(chans):
            if c.C.shape != A.shape:
                raise ValidationError(f"channel {j} coupling has shape {c.C.shape}, expected {A.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "channels", chans)

    @classmethod
    def of(cls, spec):
        return spec if isinstance(spec, cls) else cls(spec.A, spec.channels)

    @property
    def dim(self):
        return self.A.shape[0]

    @property
    def Cs(self):
        return [c.C for c in self.channels]

    @property
    def counting(self):
        return [j for j, c in enumerate(self.channels) if c.diagonal]

    def hamiltonian_spec(self, B=None):
        return HamiltonianSpec(self.A, self.channels, B)

    def fingerprint(self):
        return self.hamiltonian_spec().fingerprint()

    def config_hash(self):
        return hashlib.sha1(self.fingerprint()).hexdigest()[:12]


def _commutator_term(f, rho, A):
    return -f.gradient_pairing(rho, 1j * (A @ rho - rho @ A))


def _count_term(f, rho, C):
    Cd = dag(C)
    CdC = Cd @ C
    jump = C @ rho @ Cd
    T = np.real(np.trace(jump, axis1=-2, axis2=-1))
    X = 0.5 * (CdC @ rho + rho @ CdC) - T[..., None, None] * rho
    live = T >= JUMP_TOL
    Ts = np.where(live, T, 1.0)
    target = np.where(live[..., None, None], jump / Ts[..., None, None], rho)
    jump_term = np.where(live, T * (f(target) - f(rho)), 0.0)
    return -f.gradient_pairing(rho, X) + jump_term


def _dif_term(f, rho, C):
    Cd = dag(C)
    CdC = Cd @ C
    W = rho @ Cd + C @ rho
    omega = np.real(np.trace(W, axis1=-2, axis2=-1))
    D = W - omega[..., None, None] * rho
    drift = -0.5 * (CdC @ rho + rho @ CdC) + C @ rho @ Cd
    return 0.5 * f.hessian_form(rho, D) + f.gradient_pairing(rho, drift)


def eval_count(f, rho, A, C):
    """Counting-channel generator applied to ``f`` at ``rho`` (batched in rho).

    The jump term is dropped where ``tr(C rho C^*) < 1e-14``.
    """
    rho = np.asarray(rho, dtype=complex)
    return _commutator_term(f, rho, as_matrix(A, "A")) + _count_term(f, rho, as_matrix(C, "C"))


def eval_dif(f, rho, A, C):
    """Diffusive-channel generator; it carries no detection angle."""
    rho = np.asarray(rho, dtype=complex)
    return _commutator_term(f, rho, as_matrix(A, "A")) + _dif_term(f, rho, as_matrix(C, "C"))


def eval_mix(f, rho, spec):
    """Multichannel generator: counting terms on diagonal channels, diffusive elsewhere."""
    spec = GeneratorSpec.of(spec)
    rho = np.asarray(rho, dtype=complex)
    out = _commutator_term(f, rho, spec.A)
    for c in spec.channels:
        out = out + (_count_term(f, rho, c.C) if c.diagonal else _dif_term(f, rho, c.C))
    return out


def empirical_generator(f, spec, h, states, method="exact"):
    """``((U_h - 1) f / h)(rho)`` at each probe state."""
    hspec = spec if isinstance(spec, HamiltonianSpec) else GeneratorSpec.of(spec).hamiltonian_spec()
    states = np.asarray(states, dtype=complex)
    p, post = batch_outcomes(states, hspec, h, method)
    return (np.sum(p * f(post), axis=-1) - f(states)) / h


def empirical_generator_residual(f, spec, h, sample_states, method="exact"):
    """``max_rho |(U_h f - f)(rho)/h - (L f)(rho)|`` over the probe states."""
    emp = empirical_generator(f, spec, h, sample_states, method)
    return float(np.max(np.abs(emp - eval_mix(f, sample_states, spec))))


def fit_loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def residual_csv(hs, residuals, spec, path=None):
    """CSV table with columns ``h, residual, channel_config_hash``."""
    tag = GeneratorSpec.of(spec).config_hash()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "residual", "channel_config_hash"])
    for h, r in zip(hs, residuals):
        w.writerow([repr(float(h)), repr(float(r)), tag])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# -- reference semigroup ------------------------------------------------------


def _rank_one_target(C, tol=1e-12):
    """Fixed post-jump state when ``C`` has rank one, else None."""
    U, s, _ = np.linalg.svd(C)
    if s[0] == 0 or (len(s) > 1 and s[1] > tol * s[0]):
        return None
    u = U[:, 0]
    return np.outer(u, u.conj())


def _free_flow(rhos, A, Cs, dr, M):
    """Un-normalized no-jump states ``xi_r`` for ``r = 0, dr, ..., M dr``."""
    Keff = A - 0.5j * sum(dag(C) @ C for C in Cs)
    E = scipy.linalg.expm(-1j * Keff * dr)
    Ed = dag(E)
    out = np.empty((M + 1,) + rhos.shape, dtype=complex)
    out[0] = rhos
    for m in range(M):
        out[m + 1] = E @ out[m] @ Ed
    return out


def renewal_reference(f, spec, s, states, n_grid=4000):
    """``E f(rho_s)`` for counting channels whose couplings all have rank one.

    Every jump through channel k lands on the same state ``phi_k``, so the
    process renews at jumps.  With ``xi_r`` the no-jump flow,

        E f(rho_s) = tr(xi_s) f(xi_s / tr xi_s)
                     + sum_k int_0^s tr(C_k xi_r C_k^*) g_k(s - r) dr,

    where ``g_k(u) = E f(rho_u | rho_0 = phi_k)`` solves the same Volterra
    equation.  The convolutions use the trapezoid rule on ``n_grid`` cells
    (second-order accurate).
    """
    spec = GeneratorSpec.of(spec)
    states = np.asarray(states, dtype=complex)
    Cs = [C for C in spec.Cs if np.any(C)]
    targets = [_rank_one_target(C) for C in Cs]
    if not all(c.diagonal for c in spec.channels) or any(t is None for t in targets):
        raise ValidationError("renewal reference needs counting channels with rank-one couplings")
    if s == 0:
        return f(states)
    M = int(n_grid)
    dr = s / M
    nK = len(Cs)

    def kernels(rhos):
        xi = _free_flow(rhos, spec.A, Cs, dr, M)
        tr = np.real(np.trace(xi, axis1=-2, axis2=-1))
        F = tr * f(xi / tr[..., None, None])
        q = np.stack([np.real(np.einsum("ij,...jk,ik->...", C, xi, C.conj())) for C in Cs], axis=-1)
        return F, q  # (M+1, batch), (M+1, batch, nK)

    if nK == 0:
        return kernels(states)[0][-1]
    Fk, qk = kernels(np.array(targets))
    # g[m, k] = g_k(m dr); qk[r, k, l] jump density from phi_k into channel l
    g = np.empty((M + 1, nK))
    g[0] = Fk[0]
    lhs = np.eye(nK) - 0.5 * dr * qk[0]
    for m in range(1, M + 1):
        acc = Fk[m] + 0.5 * dr * qk[m] @ g[0]
        if m > 1:
            acc = acc + dr * np.einsum("rkl,rl->k", qk[1:m], g[m - 1 : 0 : -1])
        g[m] = np.linalg.solve(lhs, acc)
    F, q = kernels(states)
    w = np.full(M + 1, dr)
    w[0] = w[-1] = 0.5 * dr
    return F[-1] + np.einsum("r,rbl,rl->b", w, q, g[::-1])


def semigroup_reference(f, spec, s, states, h_ref=1e-5, n_grid=4000):
    """Reference value of ``T_s f`` at each probe state.

    * degree <= 1: exact adjoint Lindblad evolution of the trace coordinates;
    * counting channels with rank-one couplings: :func:`renewal_reference`;
    * otherwise the exact chain at ``h_ref`` by state enumeration, which is
      only feasible while the set of reachable states stays small.
    """
    spec = GeneratorSpec.of(spec)
    states = np.asarray(states, dtype=complex)
    if s == 0:
        return f(states)
    if f.degree <= 1:
        return f.heisenberg(spec.A, spec.Cs, s)(states)
    try:
        return renewal_reference(f, spec, s, states, n_grid)
    except ValidationError:
        pass
    n = int(round(s / h_ref))
    try:
        return iterate_transition(f, states, spec.hamiltonian_spec(), h_ref, n)
    except SizingError as exc:
        raise SizingError(f"no feasible reference for this test function and spec: {exc}") from exc


def chain_semigroup(f, spec, h, s, states, B=None):
    """``((U_h)^{[s/h]} f)(rho)`` at each probe state."""
    hspec = spec if isinstance(spec, HamiltonianSpec) else GeneratorSpec.of(spec).hamiltonian_spec(B)
    return iterate_transition(f, states, hspec, h, int(np.floor(s / h + 1e-9)))


def poisson_semigroup(f, spec, lam, s, states, B=None, tail=1e-13):
    """``(T_s^lam f)(rho)``: the chain run on a Poisson clock of rate ``1/lam``.

    ``T_s^lam = exp(s (U_lam - 1) / lam) = sum_k Pois(k; s/lam) (U_lam)^k``.
    For degree <= 1 the average channel gives this exactly through one
    matrix exponential (any channel type); otherwise the Poisson mixture is
    enumerated with :func:`iterate_transition`, truncated where the
    remaining Poisson mass is below ``tail`` and renormalized.
    """
    hspec = spec if isinstance(spec, HamiltonianSpec) else GeneratorSpec.of(spec).hamiltonian_spec(B)
    states = np.asarray(states, dtype=complex)
    if states.ndim == 2:
        states = states[None]
    lam = float(lam)
    mu = s / lam
    if f.degree <= 1:
        n = hspec.dim
        G = scipy.linalg.expm(mu * (average_channel_superoperator(hspec, lam) - np.eye(n * n)))
        return f(np.einsum("ab,pb->pa", G, states.reshape(len(states), -1)).reshape(states.shape))
    kmax = int(scipy.stats.poisson.isf(tail, mu)) + 1
    w = scipy.stats.poisson.pmf(np.arange(kmax + 1), mu)
    return iterate_transition(f, states, hspec, lam, kmax, step_weights=w / w.sum())
