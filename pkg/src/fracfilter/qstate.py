"""Finite-dimensional quantum-state algebra.

Lifted spaces use atom-major ordering: the basis index of
``e_a (x) e_{i_1} (x) ... (x) e_{i_K}`` is ``a * 2**K + word`` where ``word``
is the binary number ``i_1 ... i_K`` (``i_1`` most significant).  This is the
ordering produced by ``np.kron(rho, probe_state)``.  Use :func:`probe_blocks`
to view a lifted operator as the 2x2 (or 2^K x 2^K) array of atom blocks.

All functions accept stacks of matrices where noted (leading batch axes).
"""

from dataclasses import dataclass
from functools import reduce

import numpy as np
import scipy.linalg

from ._validation import (
    ShapeError,
    SizingError,
    as_matrix,
    check_density_matrix,
    check_hermitian,
    check_random_state,
    dag,
)

MAX_LIFTED_DIM = 1024

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)  # |1><0|, e_0 -> e_1
VACUUM = np.array([[1, 0], [0, 0]], dtype=complex)


class DensityMatrix:
    """Immutable, validated density matrix.

    Wraps a read-only complex array; supports ``np.asarray(dm)``.
    """

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = np.array(check_density_matrix(matrix), dtype=complex)
        m.setflags(write=False)
        self._m = m

    @property
    def matrix(self):
        return self._m

    @property
    def dim(self):
        return self._m.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self._m if dtype is None else self._m.astype(dtype)

    def __repr__(self):
        return f"DensityMatrix(dim={self.dim})"

    @classmethod
    def from_pure(cls, psi):
        return cls(PureState(psi).density())


class PureState:
    """Unit vector in C^n (norm checked to 1e-12)."""

    __slots__ = ("_v",)

    def __init__(self, vector):
        v = np.array(vector, dtype=complex).ravel()
        nrm = np.linalg.norm(v)
        if abs(nrm - 1.0) > 1e-12:
            raise ShapeError(f"pure state must have unit norm, got {nrm:.15g}")
        v.setflags(write=False)
        self._v = v

    @property
    def vector(self):
        return self._v

    def density(self):
        return np.outer(self._v, self._v.conj())

    def __array__(self, dtype=None, copy=None):
        return self._v if dtype is None else self._v.astype(dtype)


@dataclass(frozen=True)
class ProjectorPair:
    """Orthogonal projector pair (P0, P1) on one probe, rotated by ``phi``."""

    phi: float
    P0: np.ndarray
    P1: np.ndarray

    @property
    def diagonal(self):
        return abs(np.sin(self.phi) * np.cos(self.phi)) < 1e-12

    def __getitem__(self, i):
        return (self.P0, self.P1)[i]


def projector_pair(phi):
    """Projectors ``P0 = [[c^2, sc], [sc, s^2]]`` and ``P1 = I - P0``.

    The relative phase between probe basis vectors is fixed to zero.
    ``phi = 0`` gives the diagonal (counting) pair.
    """
    phi = float(phi)
    c, s = np.cos(phi), np.sin(phi)
    P0 = np.array([[c * c, s * c], [s * c, s * s]], dtype=complex)
    P1 = np.array([[s * s, -s * c], [-s * c, c * c]], dtype=complex)
    return ProjectorPair(phi, P0, P1)


def commutator(a, b):
    return a @ b - b @ a


def anticommutator(a, b):
    return a @ b + b @ a


def trace(x):
    return np.trace(x, axis1=-2, axis2=-1)


def expect(B, rho):
    """``tr(B rho)`` (real part) for a single matrix or a stack."""
    return np.real(np.einsum("ij,...ji->...", B, rho))


def purity(rho):
    return np.real(np.einsum("...ij,...ji->...", rho, rho))


def trace_distance(rho, sigma):
    d = rho - sigma
    d = 0.5 * (d + dag(d))
    return 0.5 * np.abs(np.linalg.eigvalsh(d)).sum(axis=-1)


def vacuum_state(K):
    """Density matrix ``Omega_1 (x) ... (x) Omega_K`` of K probes in vacuum."""
    if K < 1:
        raise ShapeError(f"channel count must be >= 1, got {K}")
    return reduce(np.kron, [VACUUM] * K)


def _check_lifted_dim(n, K, max_dim):
    N = n * 2**K
    if N > max_dim:
        raise SizingError(f"lifted dimension {n}*2^{K}={N} exceeds maximum {max_dim}")
    return N


def tensor_lift(rho, K, max_dim=MAX_LIFTED_DIM):
    """``rho (x) Omega^{(x)K}`` with every probe in its vacuum ``|e_0><e_0|``."""
    rho = as_matrix(rho, "rho")
    _check_lifted_dim(rho.shape[0], K, max_dim)
    return np.kron(rho, vacuum_state(K))


def partial_trace_probes(M, K):
    """Trace out the K probe qubits: ``(tr_p M)^i_j = sum_k M^{ik}_{jk}``.

    Accepts a stack of lifted matrices.
    """
    M = np.asarray(M)
    N = M.shape[-1]
    d = 2**K
    if M.shape[-2] != N or N % d:
        raise ShapeError(f"cannot trace {K} probes out of a {M.shape[-2:]} matrix")
    n = N // d
    R = M.reshape(M.shape[:-2] + (n, d, n, d))
    return np.einsum("...ikjk->...ij", R)


def probe_blocks(M, K=1):
    """View a lifted matrix as blocks ``B[a, b] = M^{(.,a)}_{(.,b)}``.

    ``B[a, b]`` is the n x n atom block mapping probe word ``b`` to ``a``;
    for K=1 this is the usual 2x2 block form ``[[B00, B01], [B10, B11]]``.
    """
    M = np.asarray(M)
    d = 2**K
    n = M.shape[-1] // d
    return np.moveaxis(M.reshape(n, d, n, d), (1, 3), (0, 1))


def evolution_operator(H, t):
    """``exp(-i t H)`` for Hermitian ``H`` via its eigendecomposition."""
    H = check_hermitian(H, "H")
    w, V = np.linalg.eigh(0.5 * (H + H.conj().T))
    return (V * np.exp(-1j * t * w)) @ V.conj().T


def conjugate_by_evolution(M, H, t):
    """``exp(-itH) M exp(itH)``."""
    U = evolution_operator(H, t)
    return U @ np.asarray(M, dtype=complex) @ U.conj().T


def small_time_lifted_state(rho, A, C, t):
    """Order-t expansion of the evolved lifted state for one probe.

    Blocks (probe-word order): ``[[rho - it[A,rho] - t/2 {C*C,rho}, sqrt(t) rho C*],
    [sqrt(t) C rho, t C rho C*]]``, returned as a lifted 2n x 2n matrix.
    The interaction is taken as ``C/sqrt(t)``.
    """
    rho = as_matrix(rho, "rho")
    A = as_matrix(A, "A")
    C = as_matrix(C, "C")
    Cd = C.conj().T
    rt = np.sqrt(t)
    blocks = np.empty((2, 2) + rho.shape, dtype=complex)
    blocks[0, 0] = rho - 1j * t * commutator(A, rho) - 0.5 * t * anticommutator(Cd @ C, rho)
    blocks[0, 1] = rt * rho @ Cd
    blocks[1, 0] = rt * C @ rho
    blocks[1, 1] = t * C @ rho @ Cd
    return from_probe_blocks(blocks)


def from_probe_blocks(blocks):
    """Inverse of :func:`probe_blocks`."""
    blocks = np.asarray(blocks)
    d, n = blocks.shape[0], blocks.shape[-1]
    return np.moveaxis(blocks, (0, 1), (1, 3)).reshape(n * d, n * d)


# -- Lindblad master equation ------------------------------------------------


def lindblad_rhs(rho, A, Cs):
    """``-i[A,rho] + sum_j (C_j rho C_j* - 1/2 {C_j* C_j, rho})``; batched in rho."""
    out = -1j * commutator(A, rho)
    for C in Cs:
        Cd = C.conj().T
        out = out + C @ rho @ Cd - 0.5 * anticommutator(Cd @ C, rho)
    return out


def liouvillian(A, Cs):
    """Superoperator of :func:`lindblad_rhs` acting on row-major ``vec(rho)``."""
    A = as_matrix(A, "A")
    n = A.shape[0]
    eye = np.eye(n)
    L = -1j * (np.kron(A, eye) - np.kron(eye, A.T))
    for C in Cs:
        C = as_matrix(C, "C")
        CdC = C.conj().T @ C
        L += np.kron(C, C.conj()) - 0.5 * np.kron(CdC, eye) - 0.5 * np.kron(eye, CdC.T)
    return L


def lindblad_evolve(rho, A, Cs, times):
    """Exact solution of the master equation at ``times`` (array of states)."""
    rho = as_matrix(rho, "rho")
    n = rho.shape[0]
    L = liouvillian(A, Cs)
    v0 = rho.reshape(-1)
    out = [(scipy.linalg.expm(L * t) @ v0).reshape(n, n) for t in np.atleast_1d(times)]
    return np.array(out)


def heisenberg_observable(B, A, Cs, s):
    """Adjoint-evolved observable ``B_s`` with ``tr(B rho_s) = tr(B_s rho)``."""
    B = as_matrix(B, "B")
    n = B.shape[0]
    L = liouvillian(A, Cs)
    # tr(B X) = vec(B^T) . vec(X) in row-major order
    b = scipy.linalg.expm(L * s).T @ B.T.reshape(-1)
    return b.reshape(n, n).T


# -- state constructors ------------------------------------------------------


def pure_density(psi):
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def random_unitary(n, rng):
    z = (rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    return q * (np.diagonal(r) / np.abs(np.diagonal(r)))


def random_density_matrix(n, rng=None, alpha=1.0):
    """Random mixed state: Dirichlet(alpha) spectrum, Haar eigenbasis."""
    rng = check_random_state(rng)
    p = rng.dirichlet(np.full(n, alpha))
    U = random_unitary(n, rng)
    rho = (U * p) @ U.conj().T
    return 0.5 * (rho + rho.conj().T)


def random_hermitian(n, rng=None, scale=1.0):
    rng = check_random_state(rng)
    z = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return scale * 0.5 * (z + z.conj().T)


def probe_states(n, seed=20240607, n_random=14):
    """Deterministic probe set: 6 pure states then ``n_random`` mixed ones.

    For n=2 the pure states are the six Pauli eigenstates; otherwise
    basis vectors and balanced superpositions, truncated or padded to six.
    """
    rng = np.random.default_rng(seed)
    pure = []
    if n == 2:
        s = 1 / np.sqrt(2)
        vecs = [[1, 0], [0, 1], [s, s], [s, -s], [s, 1j * s], [s, -1j * s]]
    else:
        vecs = [np.eye(n)[k] for k in range(n)]
        vecs += [(np.eye(n)[0] + np.eye(n)[k]) / np.sqrt(2) for k in range(1, n)]
        vecs += [(np.eye(n)[0] + 1j * np.eye(n)[k]) / np.sqrt(2) for k in range(1, n)]
    for v in vecs[:6]:
        pure.append(pure_density(v))
    mixed = [random_density_matrix(n, rng) for _ in range(n_random)]
    return np.array(pure + mixed)


def bloch_vector(rho):
    """Bloch coordinates ``(tr(sx rho), tr(sy rho), tr(sz rho))`` for qubits."""
    return np.stack([expect(S, rho) for S in (SIGMA_X, SIGMA_Y, SIGMA_Z)], axis=-1)


def from_bloch(r):
    r = np.asarray(r, dtype=float)
    return 0.5 * (
        np.eye(2)
        + r[..., 0, None, None] * SIGMA_X
        + r[..., 1, None, None] * SIGMA_Y
        + r[..., 2, None, None] * SIGMA_Z
    )


def _min_eig_qubit(S):
    a, d = np.real(S[..., 0, 0]), np.real(S[..., 1, 1])
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + np.abs(S[..., 0, 1]) ** 2)


def project_to_state(M, _tol=1e-13):
    """Nearest-in-spectrum density matrix: symmetrize, clip eigenvalues, renormalize.

    Inputs that are already positive semidefinite are only symmetrized and
    trace-normalized.  Works on stacks.

    Raises
    ------
    DegenerateStateError
        If the trace vanishes after clipping.
    """
    from ._validation import DegenerateStateError

    M = np.asarray(M, dtype=complex)
    if M.shape[-1] == 2:
        return _project_qubit(M, _tol)
    S = 0.5 * (M + dag(M))
    bad = np.linalg.eigvalsh(S)[..., 0] < 0
    if np.any(bad):
        S = S.copy()
        w, V = np.linalg.eigh(S[bad])
        S[bad] = (V * np.clip(w, 0.0, None)[..., None, :]) @ dag(V)
    tr = np.real(trace(S))
    if np.any(tr <= _tol):
        raise DegenerateStateError("state has zero trace after clipping")
    return S / tr[..., None, None]


def _project_qubit(M, tol):
    """Closed form for 2x2: clipping keeps the Bloch direction, ``(I + r/|r| . sigma)/2``."""
    from ._validation import DegenerateStateError

    a = M[..., 0, 0].real
    d = M[..., 1, 1].real
    b = 0.5 * (M[..., 0, 1] + M[..., 1, 0].conj())
    tr = a + d
    hr = np.sqrt(0.25 * (a - d) ** 2 + b.real**2 + b.imag**2)
    if np.any(0.5 * tr + hr <= tol):
        raise DegenerateStateError("state has zero trace after clipping")
    bad = 0.5 * tr < hr
    den = np.where(bad, 2 * hr, tr)
    a = np.where(bad, 0.5 + 0.5 * (a - d) / den, a / den)
    b = b / den
    out = np.empty(M.shape, dtype=complex)
    out[..., 0, 0] = a
    out[..., 1, 1] = 1.0 - a
    out[..., 0, 1] = b
    out[..., 1, 0] = b.conj()
    return out


def superoperator(X, Y):
    """Matrix of ``rho -> X rho Y`` on row-major ``vec(rho)``."""
    return np.kron(X, np.asarray(Y).T)
