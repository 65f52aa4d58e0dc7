"""Markov chains of sequential indirect observations.

An atom with Hamiltonian ``A`` is coupled for a time ``t`` to K two-level
probes prepared in their vacuum ``e_0``.  The lifted Hamiltonian is

    H = A (x) Pvac + B (x) (I - Pvac)
        + t^{-1/2} sum_j ( i C_j (x) r_j  -  i C_j^* (x) r_j^* ),

where ``Pvac`` projects every probe onto ``e_0``, ``r_j = |e_1><e_0|`` acts on
probe j, and ``B`` defaults to 0.  Passing ``B = A`` gives the free part
``A (x) I``.  After the interaction each probe is measured with a projector
pair rotated by the channel angle, and the atom is conditioned on the
outcome word.

Every probe projector is rank one, so each outcome word ``w`` acts on the atom
through a single Kraus operator ``M_w = (I (x) <pi_w|) exp(-itH) (I (x) |0>)``.
These are cached per (spec, t) and applied to stacks of states with einsum.

The interaction scale ``h`` of the chain and the random waiting time between
measurements are distinct: waiting times only advance the clock, the
transition law always uses ``h``.
"""

import csv
import io
import itertools
import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from ._validation import (
    NumericalError,
    ShapeError,
    SizingError,
    StepSizeError,
    ValidationError,
    as_matrix,
    check_density_matrix,
    check_hermitian,
    check_positive,
    check_random_state,
    dag,
)
from .qstate import (
    MAX_LIFTED_DIM,
    evolution_operator,
    project_to_state,
    trace,
)

DROP_PROB = 1e-14

_RAISE = np.array([[0, 0], [1, 0]], dtype=complex)


@dataclass(frozen=True)
class ChannelSpec:
    """One observation channel: coupling ``C`` and detection angle ``phi``.

    ``phi = 0`` (or any multiple of pi/2) is counting detection; other
    angles give homodyne-type diffusive detection.
    """

    C: np.ndarray
    phi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "C", as_matrix(self.C, "C"))
        object.__setattr__(self, "phi", float(self.phi))

    @property
    def diagonal(self):
        return abs(np.sin(self.phi) * np.cos(self.phi)) < 1e-12

    @property
    def counting(self):
        return self.diagonal


def as_channel(c):
    """Coerce a ChannelSpec, a ``(C, phi)`` pair or a bare matrix."""
    if isinstance(c, ChannelSpec):
        return c
    if isinstance(c, tuple) and len(c) == 2 and np.ndim(c[1]) == 0:
        return ChannelSpec(*c)
    return ChannelSpec(c)


@dataclass(frozen=True)
class HamiltonianSpec:
    """Atom Hamiltonian ``A``, probe block ``B`` (default 0) and channels."""

    A: np.ndarray
    channels: tuple = ()
    B: np.ndarray = None

    def __post_init__(self):
        A = check_hermitian(self.A, "A")
        n = A.shape[0]
        B = np.zeros_like(A) if self.B is None else check_hermitian(self.B, "B")
        chans = tuple(as_channel(c) for c in self.channels)
        if B.shape != A.shape:
            raise ShapeError(f"B has shape {B.shape}, expected {A.shape}")
        for j, c in enumerate(chans):
            if c.C.shape != (n, n):
                raise ShapeError(f"channel {j} coupling has shape {c.C.shape}, expected {(n, n)}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "channels", chans)

    @property
    def dim(self):
        return self.A.shape[0]

    @property
    def K(self):
        return len(self.channels)

    @property
    def Cs(self):
        return [c.C for c in self.channels]

    def fingerprint(self):
        parts = [self.A.tobytes(), self.B.tobytes()]
        for c in self.channels:
            parts += [c.C.tobytes(), np.float64(c.phi).tobytes()]
        return b"|".join(parts)


@dataclass
class OutcomeDistribution:
    """Outcome words, their probabilities and normalized post-states."""

    words: list
    probs: np.ndarray
    states: np.ndarray

    def __len__(self):
        return len(self.words)

    def expect(self, f):
        return float(np.dot(self.probs, f(self.states)))

    def mean_state(self):
        return np.einsum("w,wij->ij", self.probs, self.states)

    def sample(self, rng):
        i = min(np.searchsorted(np.cumsum(self.probs), rng.random() * self.probs.sum()), len(self) - 1)
        return self.words[i], self.states[i]


def outcome_words(K):
    return list(itertools.product((0, 1), repeat=K))


def _probe_rotation(spec):
    """Rows are the rank-one probe vectors ``pi_w`` for every outcome word."""
    R = np.ones((1, 1))
    for c in spec.channels:
        cs, sn = np.cos(c.phi), np.sin(c.phi)
        R = np.kron(R, np.array([[cs, sn], [-sn, cs]]))
    return R


def lifted_hamiltonian(spec, t, scaled=True, max_dim=MAX_LIFTED_DIM):
    n, K = spec.dim, spec.K
    d = 2**K
    if n * d > max_dim:
        raise SizingError(f"lifted dimension {n}*2^{K}={n * d} exceeds maximum {max_dim}")
    vac = np.zeros((d, d))
    vac[0, 0] = 1.0
    H = np.kron(spec.A, vac) + np.kron(spec.B, np.eye(d) - vac)
    g = 1.0 / np.sqrt(t) if scaled else 1.0
    for j, c in enumerate(spec.channels):
        r = np.kron(np.kron(np.eye(2**j), _RAISE), np.eye(2 ** (K - j - 1)))
        X = 1j * np.kron(c.C, r)
        H = H + g * (X + dag(X))
    return H


_KRAUS_CACHE = OrderedDict()
_KRAUS_CACHE_SIZE = 64


def kraus_operators(spec, t, scaled=True):
    """Kraus operators ``(2^K, n, n)`` of one exact measurement step, cached."""
    t = check_positive(t, "t")
    key = (spec.fingerprint(), t, scaled)
    hit = _KRAUS_CACHE.get(key)
    if hit is not None:
        return hit
    n, d = spec.dim, 2**spec.K
    U = evolution_operator(lifted_hamiltonian(spec, t, scaled), t)
    V0 = U.reshape(n, d, n, d)[:, :, :, 0]
    M = np.einsum("wk,akb->wab", _probe_rotation(spec), V0)
    M.setflags(write=False)
    _KRAUS_CACHE[key] = M
    if len(_KRAUS_CACHE) > _KRAUS_CACHE_SIZE:
        _KRAUS_CACHE.popitem(last=False)
    return M


def _unnormalized_exact(rhos, spec, t, scaled=True):
    M = kraus_operators(spec, t, scaled)
    return np.einsum("wab,...bc,wdc->...wad", M, rhos, M.conj())


def _unnormalized_asymptotic(rhos, spec, t):
    """Order-t lifted blocks projected on each outcome word (batched)."""
    A, Cs = spec.A, spec.Cs
    K, d = spec.K, 2**spec.K
    rt = np.sqrt(t)
    shape = rhos.shape[:-2] + (d, d) + rhos.shape[-2:]
    G = np.zeros(shape, dtype=complex)
    comm = A @ rhos - rhos @ A
    G[..., 0, 0, :, :] = rhos - 1j * t * comm
    for j, C in enumerate(Cs):
        ej = 1 << (K - 1 - j)
        Cd = dag(C)
        G[..., 0, 0, :, :] -= 0.5 * t * (Cd @ C @ rhos + rhos @ Cd @ C)
        G[..., ej, 0, :, :] = rt * C @ rhos
        G[..., 0, ej, :, :] = rt * rhos @ Cd
        for k, C2 in enumerate(Cs):
            ek = 1 << (K - 1 - k)
            G[..., ej, ek, :, :] = t * C @ rhos @ dag(C2)
            if k > j:
                D = 0.5 * t * (C @ C2 + C2 @ C) @ rhos
                G[..., ej | ek, 0, :, :] = D
                G[..., 0, ej | ek, :, :] = dag(D)
    R = _probe_rotation(spec)
    return np.einsum("wa,wb,...abij->...wij", R, R, G)


def _normalize(unnorm, check_negative=False):
    probs = np.real(trace(unnorm))
    if check_negative and np.any(probs < -1e-14):
        raise StepSizeError(f"negative outcome probability {probs.min():.3g}; reduce the step")
    probs = np.clip(probs, 0.0, None)
    return probs


def step_exact(rho, spec, t, scaled=True):
    """Exact outcome distribution of one indirect measurement of duration ``t``.

    The interaction is scaled as ``C_j / sqrt(t)`` unless ``scaled=False``.
    Outcomes with probability below 1e-14 are dropped and the rest
    renormalized.

    Raises
    ------
    NumericalError
        If every outcome probability underflows.
    """
    rho = check_density_matrix(rho)
    if spec.K == 0:
        U = evolution_operator(spec.A, t)
        return OutcomeDistribution([()], np.ones(1), (U @ rho @ dag(U))[None])
    unnorm = _unnormalized_exact(rho, spec, t, scaled)
    return _collect(unnorm, spec.K, exact=True)


def step_asymptotic(rho, spec, t):
    """Order-t outcome distribution built from the small-time lifted blocks.

    Raises
    ------
    StepSizeError
        If ``t`` is so large that an outcome probability is negative.
    """
    rho = check_density_matrix(rho)
    t = check_positive(t, "t")
    unnorm = _unnormalized_asymptotic(rho, spec, t)
    return _collect(unnorm, spec.K, exact=False)


def _collect(unnorm, K, exact):
    probs = _normalize(unnorm, check_negative=not exact)
    keep = probs >= DROP_PROB
    if not np.any(keep):
        raise NumericalError("all outcome probabilities underflowed")
    words = [w for w, k in zip(outcome_words(K), keep) if k]
    p = probs[keep]
    states = unnorm[keep] / p[:, None, None]
    if exact:
        states = 0.5 * (states + dag(states))
    else:
        states = project_to_state(states)
    return OutcomeDistribution(words, p / p.sum(), states)


def batch_outcomes(rhos, spec, t, method="exact", scaled=True):
    """Probabilities ``(..., 2^K)`` and normalized post-states for a stack.

    Zero-probability branches get the input state as a placeholder.
    """
    rhos = np.asarray(rhos, dtype=complex)
    if method == "exact":
        unnorm = _unnormalized_exact(rhos, spec, t, scaled)
    elif method == "asymptotic":
        unnorm = _unnormalized_asymptotic(rhos, spec, t)
    else:
        raise ValidationError(f"unknown step method {method!r}")
    probs = _normalize(unnorm, check_negative=method == "asymptotic")
    safe = np.where(probs >= DROP_PROB, probs, 1.0)
    states = unnorm / safe[..., None, None]
    states = np.where((probs >= DROP_PROB)[..., None, None], states, rhos[..., None, :, :])
    states = 0.5 * (states + dag(states))
    probs = np.where(probs >= DROP_PROB, probs, 0.0)
    return probs / probs.sum(axis=-1, keepdims=True), states


def transition_operator(f, rho, spec, t, scaled=True):
    """``(U_t f)(rho) = sum_w p_w f(rho_w)`` using the exact kernel.

    ``f`` must accept a stack of density matrices and return one value per
    matrix (an :class:`ObservablePolynomial` does).
    """
    return step_exact(rho, spec, t, scaled).expect(f)


def average_channel(rho, spec, t, scaled=True):
    """Unconditioned state ``sum_w p_w rho_w`` after one step."""
    return np.einsum("...wij->...ij", _unnormalized_exact(np.asarray(rho, dtype=complex), spec, t, scaled))


def average_channel_superoperator(spec, t, scaled=True):
    """Matrix of :func:`average_channel` on row-major ``vec(rho)``."""
    M = kraus_operators(spec, t, scaled)
    return np.einsum("wab,wcd->acbd", M, M.conj()).reshape(spec.dim**2, spec.dim**2)


def zeno_error(B, rho, spec, s, t):
    """Distance of the unscaled-coupling chain from the free unitary flow.

    With the interaction NOT scaled by ``1/sqrt(t)``, iterating the averaged
    channel ``[s/t]`` times tends to ``exp(-isA) rho exp(isA)`` as ``t -> 0``.
    Returns ``|tr(B rho_chain) - tr(B rho_free)|``.
    """
    rho = check_density_matrix(rho)
    n = rho.shape[0]
    steps = int(round(s / t))
    Phi = average_channel_superoperator(spec, t, scaled=False)
    v = np.linalg.matrix_power(Phi, steps) @ rho.reshape(-1)
    U = evolution_operator(spec.A, steps * t)
    free = U @ rho @ dag(U)
    return abs(np.real(np.trace(B @ v.reshape(n, n)) - np.trace(B @ free)))


# -- iterated transition operator ---------------------------------------------


def _state_key(M, decimals):
    x = np.round(np.concatenate([M.real.ravel(), M.imag.ravel()]), decimals) + 0.0
    return x.tobytes()


def iterate_transition(f, rhos, spec, t, n_steps, decimals=11, max_states=200_000, step_weights=None):
    """``(U_t)^n f`` at each state of a stack, by exact enumeration.

    Post-states are merged when they agree to ``decimals`` decimals, so the
    support grows slowly whenever the jump targets are few (for example a
    rank-one coupling, where every click lands on the same state).
    Transitions are computed once per distinct state.

    With ``step_weights`` (length ``n_steps + 1``) the result is the mixture
    ``sum_k w_k (U_t)^k f`` instead, from the same forward pass.

    Returns an array with one value per input state.

    Raises
    ------
    SizingError
        If the number of distinct states exceeds ``max_states``.
    """
    rhos = np.asarray(rhos, dtype=complex)
    if rhos.ndim == 2:
        rhos = rhos[None]
    d = 2**spec.K
    states, keys = [], {}
    succ = np.zeros((0, d), dtype=np.int64)
    prob = np.zeros((0, d))

    def register(mats):
        idx = np.empty(len(mats), dtype=np.int64)
        for i, m in enumerate(mats):
            k = _state_key(m, decimals)
            j = keys.get(k)
            if j is None:
                j = len(states)
                keys[k] = j
                states.append(m)
            idx[i] = j
        if len(states) > max_states:
            raise SizingError(f"state support exceeded {max_states}")
        return idx

    start = register(rhos)
    W = np.zeros((len(states), len(rhos)))
    W[start, np.arange(len(rhos))] = 1.0
    if step_weights is not None:
        step_weights = np.asarray(step_weights, dtype=float)
        if step_weights.shape != (int(n_steps) + 1,):
            raise ValidationError(f"step_weights needs {int(n_steps) + 1} entries, got {step_weights.shape}")
        acc = step_weights[0] * W
    for k in range(int(n_steps)):
        nknown = succ.shape[0]
        if nknown < len(states):
            new = np.array(states[nknown:])
            p, post = batch_outcomes(new, spec, t)
            nxt = register(post.reshape(-1, *post.shape[-2:])).reshape(len(new), d)
            succ = np.vstack([succ, nxt])
            prob = np.vstack([prob, p])
        active = np.flatnonzero(np.any(W != 0.0, axis=1))
        P = scipy.sparse.csr_matrix(
            (prob[active].ravel(), (np.repeat(np.arange(active.size), d), succ[active].ravel())),
            shape=(active.size, len(states)),
        )
        W = np.asarray(P.T @ W[active])
        if step_weights is not None:
            acc = np.vstack([acc, np.zeros((W.shape[0] - acc.shape[0], W.shape[1]))]) + step_weights[k + 1] * W
    fv = f(np.array(states))
    return (W if step_weights is None else acc).T @ fv


# -- trajectories -------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    """One simulated run: measurement times, states, outcome words, waits."""

    times: np.ndarray
    states: np.ndarray
    outcomes: list
    waits: np.ndarray
    seed: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.states) != len(self.times):
            raise ShapeError("states and times must have equal length")
        if self.times[0] != 0 or np.any(np.diff(self.times) <= 0):
            raise ValidationError("times must start at 0 and strictly increase")

    def __len__(self):
        return len(self.times)

    def state_at(self, t):
        """State in force at time ``t`` (piecewise constant between events)."""
        i = np.searchsorted(self.times, t, side="right") - 1
        return self.states[max(i, 0)]

    def to_csv(self, path=None):
        n = self.states.shape[-1]
        head = ["step", "time", "outcome_word"]
        head += [f"re_{i}{j}" for i in range(n) for j in range(n)]
        head += [f"im_{i}{j}" for i in range(n) for j in range(n)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        for k, (tm, s) in enumerate(zip(self.times, self.states)):
            word = "".join(map(str, self.outcomes[k])) if k < len(self.outcomes) and self.outcomes[k] else ""
            w.writerow([k, repr(float(tm)), word] + [repr(float(x)) for x in s.real.ravel()] + [repr(float(x)) for x in s.imag.ravel()])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_json(self, path=None):
        doc = {
            "seed": self.seed,
            "times": self.times.tolist(),
            "waits": np.asarray(self.waits).tolist(),
            "outcomes": ["".join(map(str, o)) for o in self.outcomes],
            "states_re": self.states.real.tolist(),
            "states_im": self.states.imag.tolist(),
            "meta": self.meta,
        }
        text = json.dumps(doc)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        states = np.array(doc["states_re"]) + 1j * np.array(doc["states_im"])
        outs = [tuple(int(c) for c in o) for o in doc["outcomes"]]
        return cls(np.array(doc["times"]), states, outs, np.array(doc["waits"]), doc["seed"], doc.get("meta", {}))


def _draw_wait(waiting, rng, max_tries=100):
    for _ in range(max_tries):
        tau = float(waiting.sample(rng))
        if np.isfinite(tau) and tau > 0:
            return tau
    raise NumericalError("waiting law produced no finite positive draw")


def sample_trajectory(rho0, spec, waiting, horizon, rng_seed=None, h=None, method="exact"):
    """Run the chain until the clock passes ``horizon``.

    Each event draws a waiting time from ``waiting`` (an object with a
    ``sample(rng)`` method, see :class:`fracfilter.ctrw.WaitingLaw`) and then
    samples one measurement with interaction scale ``h``.  The first state
    is recorded at time 0; events falling after ``horizon`` are not applied.

    ``h`` defaults to the waiting law's natural step when it has one.
    """
    rho = check_density_matrix(rho0)
    horizon = check_positive(horizon, "horizon")
    if h is None:
        h = getattr(waiting, "natural_step", None)
        if h is None:
            raise ValidationError("interaction scale h is required for this waiting law")
    rng = check_random_state(rng_seed)
    times, states, outs, waits = [0.0], [rho], [()], []
    clock = 0.0
    while True:
        tau = _draw_wait(waiting, rng)
        # events landing on the horizon count (degenerate law: exactly horizon/h steps)
        if clock + tau > horizon * (1 + 1e-12):
            break
        clock += tau
        p, post = batch_outcomes(rho, spec, h, method)
        i = min(int(np.searchsorted(np.cumsum(p), rng.random())), len(p) - 1)
        rho = post[i]
        times.append(clock)
        states.append(rho)
        outs.append(outcome_words(spec.K)[i])
        waits.append(tau)
    return TrajectoryRecord(np.array(times), np.array(states), outs, np.array(waits), seed=rng_seed)


def run_chain_batch(rho0, spec, h, n_steps, rng, method="exact"):
    """Final states of many independent chains, vectorized across paths.

    ``n_steps`` gives the number of measurements for each path (int array).
    Uniforms are drawn for every path at every step, so paths with common
    ``rng`` streams share noise regardless of their step counts.
    """
    n_steps = np.asarray(n_steps, dtype=np.int64)
    P = n_steps.size
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (P,) + np.shape(rho0)).copy()
    for k in range(int(n_steps.max(initial=0))):
        live = n_steps > k
        u = rng.random(P)
        idx = np.flatnonzero(live)
        p, post = batch_outcomes(rho[idx], spec, h, method)
        choice = (np.cumsum(p, axis=1) < u[idx, None]).sum(axis=1)
        choice = np.minimum(choice, p.shape[1] - 1)
        rho[idx] = post[np.arange(idx.size), choice]
    return rho
