"""Integrators for the Belavkin filtering equations.

All step functions act on stacks of states (leading batch axes) with one
noise value per stack element.  The diffusive equations default to the
Milstein scheme (diagonal noise), which is strong order 1; Euler-Maruyama
loses purity and pathwise agreement like ``sqrt(dt)`` and is kept as an
option.  Counting channels jump by thinning: a jump through channel j
happens with probability ``dt * tr(C_j rho C_j^*)``.
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    NumericalError,
    StepSizeError,
    ValidationError,
    check_positive,
    dag,
)
from .generators import GeneratorSpec
from .qstate import expect, project_to_state, superoperator, trace

SCHEMES = ("milstein", "euler-maruyama", "drift-rk4+diffusion-euler")
JUMP_TOL = 1e-14


@dataclass(frozen=True)
class SdeConfig:
    spec: GeneratorSpec
    dt: float
    scheme: str = "milstein"
    projection: bool = True

    def __post_init__(self):
        object.__setattr__(self, "spec", GeneratorSpec.of(self.spec))
        check_positive(self.dt, "dt")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")


@dataclass
class NoisePath:
    """Gaussian increments per diffusive channel and thinning uniforms per counting channel.

    ``dW`` has shape ``(steps, paths, n_diffusive)`` and ``U`` has shape
    ``(steps, paths, n_counting)``.
    """

    dW: np.ndarray
    U: np.ndarray
    dt: float

    @classmethod
    def draw(cls, spec, dt, steps, paths, rng):
        spec = GeneratorSpec.of(spec)
        nc = len(spec.counting)
        nd = len(spec.channels) - nc
        dW = rng.normal(scale=np.sqrt(dt), size=(steps, paths, nd))
        U = rng.random(size=(steps, paths, nc))
        return cls(dW, U, dt)


def _tr(x):
    return np.real(trace(x))


class _ChannelOps:
    """Superoperators of one (A, C) pair acting on row-major ``vec(rho)`` rows.

    A batch of states is held as ``V`` with shape ``(..., n*n)`` and every
    linear map is one matrix product ``V @ S.T``.
    """

    def __init__(self, A, C):
        n = A.shape[0]
        I = np.eye(n)
        Cd = dag(C)
        CdC = Cd @ C
        self.n = n
        self.ham = (-1j * (superoperator(A, I) - superoperator(I, A))).T
        self.damp = (-0.5 * (superoperator(CdC, I) + superoperator(I, CdC))).T
        self.jump = superoperator(C, Cd).T
        self.W = (superoperator(I, Cd) + superoperator(C, I)).T
        self.tr = I.reshape(-1)
        self.rate = CdC.T.reshape(-1)


_OPS_CACHE = {}


def _ops(A, C):
    A = np.asarray(A, dtype=complex)
    C = np.asarray(C, dtype=complex)
    key = (A.tobytes(), C.tobytes(), A.shape)
    op = _OPS_CACHE.get(key)
    if op is None:
        if len(_OPS_CACHE) > 256:
            _OPS_CACHE.clear()
        op = _OPS_CACHE[key] = _ChannelOps(A, C)
    return op


def _vec(rho):
    rho = np.asarray(rho, dtype=complex)
    return rho.reshape(rho.shape[:-2] + (-1,)), rho.shape


def _tv(V, w):
    """Real linear functional ``tr(X rho)`` for a stack of vectors."""
    return np.real(V @ w)[..., None]


def _v_counting_drift(V, ops_list, ham):
    out = V @ ham
    for o in ops_list:
        out = out + V @ o.damp + _tv(V, o.rate) * V
    return out


def _v_lindblad(V, ops_list, ham):
    out = V @ ham
    for o in ops_list:
        out = out + V @ (o.damp + o.jump)
    return out


def _v_diffusion(V, o):
    WV = V @ o.W
    return WV - _tv(WV, o.tr) * V, WV


def _v_diffusion_derivative(V, WV, o, X):
    WX = X @ o.W
    return WX - _tv(WX, o.tr) * V - _tv(WV, o.tr) * X


def counting_drift(rho, A, Cs):
    """``-i[A,rho] + sum_j (-1/2 {C_j^*C_j, rho} + tr(C_j rho C_j^*) rho)``."""
    V, shape = _vec(rho)
    ops_list = [_ops(A, C) for C in Cs]
    ham = _ops(A, np.zeros_like(A)).ham
    return _v_counting_drift(V, ops_list, ham).reshape(shape)


def lindblad_drift(rho, A, Cs):
    V, shape = _vec(rho)
    ham = _ops(A, np.zeros_like(A)).ham
    return _v_lindblad(V, [_ops(A, C) for C in Cs], ham).reshape(shape)


def diffusion_coefficient(rho, C):
    """``rho C^* + C rho - omega_obs rho`` with ``omega_obs = tr(rho C^* + C rho)``."""
    C = np.asarray(C, dtype=complex)
    V, shape = _vec(rho)
    return _v_diffusion(V, _ops(np.zeros_like(C), C))[0].reshape(shape)


def _rk4(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _finish(rho, project):
    if project:
        return project_to_state(rho)
    rho = 0.5 * (rho + dag(rho))
    return rho / _tr(rho)[..., None, None]


def _jump(V, o, u, dt):
    """Thinning decision and normalized jump target for one counting channel."""
    target = V @ o.jump
    T = np.real(target @ o.tr)
    if np.any(dt * T >= 1.0):
        raise StepSizeError(f"dt * intensity = {np.max(dt * T):.3g} >= 1; reduce dt")
    jumped = (u < dt * T) & (T >= JUMP_TOL)
    safe = np.where(T >= JUMP_TOL, T, 1.0)
    return jumped, target / safe[..., None]


def _mixed_increment(V, A, cnt, dif, dt, dW, scheme):
    """Continuous part of the multichannel step (vectorized states)."""
    ham = _ops(A, np.zeros_like(A)).ham
    co = [_ops(A, C) for C in cnt]
    do = [_ops(A, C) for C in dif]

    def drift(X):
        out = _v_counting_drift(X, co, ham)
        for o in do:
            out = out + X @ (o.damp + o.jump)
        return out

    if scheme == "drift-rk4+diffusion-euler":
        inc = _rk4(drift, V, dt) - V
    else:
        inc = dt * drift(V)
    for k, o in enumerate(do):
        w = dW[..., k, None]
        Bv, WV = _v_diffusion(V, o)
        inc = inc + Bv * w
        if scheme == "milstein":
            inc = inc + 0.5 * _v_diffusion_derivative(V, WV, o, Bv) * (w**2 - dt)
    return inc, co


def step_counting(rho, A, C, dt, u, project=True, scheme="euler-maruyama"):
    """One thinning step of the counting filter.

    ``u`` are uniforms on [0, 1) (one per stack element).  Without a jump the
    state takes an Euler (or RK4) step of the drift
    ``-i[A,rho] - 1/2{C^*C,rho} + tr(C rho C^*) rho``.

    Raises
    ------
    StepSizeError
        If ``dt * tr(C rho C^*) >= 1`` somewhere.
    """
    return step_mixed(rho, GeneratorSpec(A, [(C, 0.0)]), dt, np.zeros(np.shape(u) + (0,)),
                      np.asarray(u)[..., None], scheme, project)


def raw_diffusive_increment(rho, A, C, dt, dW, scheme="milstein"):
    """Increment of the diffusive filter before symmetrization/projection."""
    V, shape = _vec(rho)
    dW = np.asarray(dW, dtype=float)[..., None]
    inc, _ = _mixed_increment(V, np.asarray(A, dtype=complex), [], [np.asarray(C, dtype=complex)], dt, dW, scheme)
    return inc.reshape(shape)


def step_diffusive(rho, A, C, dt, dW, scheme="milstein", project=True):
    """One step of ``d rho = L(rho) dt + (rho C^* + C rho - omega_obs rho) dW``."""
    rho = np.asarray(rho, dtype=complex)
    return _finish(rho + raw_diffusive_increment(rho, A, C, dt, dW, scheme), project)


def step_mixed(rho, spec, dt, dW, u, scheme="milstein", project=True):
    """One step of the multichannel filter.

    ``dW[..., k]`` drives the k-th diffusive channel and ``u[..., k]`` thins
    the k-th counting channel (channels in spec order).  The Milstein
    correction uses the diagonal terms only.  If several counting channels
    fire in one step the first one wins (an O(dt^2) event).
    """
    spec = GeneratorSpec.of(spec)
    V, shape = _vec(rho)
    dW = np.asarray(dW, dtype=float)
    u = np.asarray(u, dtype=float)
    cnt = [c.C for c in spec.channels if c.diagonal]
    dif = [c.C for c in spec.channels if not c.diagonal]
    inc, co = _mixed_increment(V, spec.A, cnt, dif, dt, dW, scheme)
    new = V + inc
    done = np.zeros(V.shape[:-1], dtype=bool)
    for k, o in enumerate(co):
        jumped, target = _jump(V, o, u[..., k], dt)
        take = jumped & ~done
        new = np.where(take[..., None], target, new)
        done |= jumped
    return _finish(new.reshape(shape), project)


def step_pure(psi, A, C, dt, dW, scheme="milstein"):
    """One step of the pure-state diffusive filter.

    ``d psi = (-iA - 1/2 C^*C + m C - m^2/2) psi dt + (C - m) psi dW`` with
    ``m = Re <psi, C psi>``.  For Hermitian ``C`` this is the familiar form
    with ``-(C - <C>)^2/2`` drift.  The vector is renormalized afterwards.
    """
    psi = np.asarray(psi, dtype=complex)
    dW = np.asarray(dW, dtype=float)[..., None]
    Cpsi = psi @ C.T
    m = np.real(np.sum(psi.conj() * Cpsi, axis=-1))[..., None]
    K = -1j * A - 0.5 * dag(C) @ C
    drift = psi @ K.T + m * Cpsi - 0.5 * m**2 * psi
    b = Cpsi - m * psi
    new = psi + drift * dt + b * dW
    if scheme == "milstein":
        Cb = b @ C.T
        dm = np.real(np.sum(b.conj() * Cpsi + psi.conj() * Cb, axis=-1))[..., None]
        new = new + 0.5 * (Cb - m * b - dm * psi) * (dW**2 - dt)
    return new / np.linalg.norm(new, axis=-1, keepdims=True)


def step_linear(xi, A, C, dt, dY, scheme="milstein"):
    """One step of the linear (un-normalized) diffusive filter.

    ``d xi = L(xi) dt + (xi C^* + C xi) dY``.  Returns ``(xi_new, rho_new, dW)``
    where ``rho_new = xi_new / tr xi_new`` and
    ``dW = dY - tr(xi C^* + C xi) / tr(xi) dt`` is the innovation increment
    that drives the normalized equation along the same record.

    Raises
    ------
    NumericalError
        If the trace of ``xi`` is not positive.
    """
    V, shape = _vec(xi)
    dY = np.asarray(dY, dtype=float)
    o = _ops(A, C)
    trx = np.real(V @ o.tr)
    if np.any(trx <= 0):
        raise NumericalError("linear filter lost positive trace")
    WV = V @ o.W
    dW = dY - np.real(WV @ o.tr) / trx * dt
    y = dY[..., None]
    new = V + dt * (V @ (o.ham + o.damp + o.jump)) + WV * y
    if scheme == "milstein":
        new = new + 0.5 * (WV @ o.W) * (y**2 - dt)
    new = new.reshape(shape)
    trn = _tr(new)
    if np.any(trn <= 0):
        raise NumericalError("linear filter lost positive trace")
    return new, new / trn[..., None, None], dW


def drift_flow_rk4(rho, A, Cs, dt, horizon):
    """Integrate only the counting drift with RK4 (no projection).

    Returns the states at every step, shape ``(steps + 1, ...)``.
    """
    rho = np.asarray(rho, dtype=complex)
    steps = int(round(horizon / dt))
    out = np.empty((steps + 1,) + rho.shape, dtype=complex)
    out[0] = rho
    for k in range(steps):
        out[k + 1] = _rk4(lambda r: counting_drift(r, A, Cs), out[k], dt)
    return out


# -- ensembles ------------------------------------------------------------------


@dataclass
class EnsembleSummary:
    """Means and standard errors of ``tr(B rho_t)`` at checkpoint times."""

    times: np.ndarray
    means: np.ndarray
    stderr: np.ndarray
    n_paths: int
    names: list = field(default_factory=list)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "observable", "mean", "stderr", "n_paths"])
        for k, name in enumerate(self.names):
            for i, t in enumerate(self.times):
                w.writerow([repr(float(t)), name, repr(float(self.means[k, i])), repr(float(self.stderr[k, i])), self.n_paths])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def simulate_batch(rho0, config, n_steps, n_paths, rng, record_every=1, observe=None, callback=None):
    """Integrate ``n_paths`` trajectories of the mixed filter for ``n_steps``.

    Returns ``observe(states)`` (default: the states themselves) at steps
    ``0, record_every, 2 record_every, ...``, stacked along axis 0.  If
    ``callback`` is given it is called as ``callback(k, states)`` after every
    step (and at k=0) and nothing is recorded.
    """
    spec = config.spec
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (n_paths,) + np.shape(rho0)).copy()
    nc = len(spec.counting)
    nd = len(spec.channels) - nc
    obs = observe or (lambda r: r.copy())
    rec = []
    if callback is None:
        rec.append(obs(rho))
    else:
        callback(0, rho)
    sq = np.sqrt(config.dt)
    for k in range(1, n_steps + 1):
        dW = rng.normal(scale=sq, size=(n_paths, nd))
        u = rng.random(size=(n_paths, nc))
        rho = step_mixed(rho, spec, config.dt, dW, u, config.scheme, config.projection)
        if callback is not None:
            callback(k, rho)
        elif k % record_every == 0:
            rec.append(obs(rho))
    return np.array(rec) if callback is None else rho


def run_ensemble(rho0, config, horizon, n_paths, observables, n_checkpoints=10, seed=0, chunk_size=1000, threads=1):
    """Monte Carlo means of ``tr(B rho_t)`` at ``n_checkpoints`` equally spaced times.

    Paths are simulated in chunks of ``chunk_size``; chunk ``c`` draws its
    noise from ``default_rng([seed, c])`` so the result does not depend on
    ``threads``.  ``observables`` maps names to Hermitian matrices.
    """
    names = list(observables)
    Bs = np.array([observables[k] for k in names])
    n_steps = int(round(horizon / config.dt))
    every = n_steps // n_checkpoints
    if every * n_checkpoints != n_steps:
        raise ValidationError("horizon/dt must be a multiple of n_checkpoints")
    sizes = [min(chunk_size, n_paths - s) for s in range(0, n_paths, chunk_size)]

    def work(c):
        rng = np.random.default_rng([seed, c])
        vals = simulate_batch(rho0, config, n_steps, sizes[c], rng, every,
                              observe=lambda r: np.real(np.einsum("kij,pji->kp", Bs, r)))
        return vals.sum(axis=-1), (vals**2).sum(axis=-1)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, range(len(sizes))))
    else:
        parts = [work(c) for c in range(len(sizes))]
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / n_paths
    var = np.maximum(s2 / n_paths - mean**2, 0.0) * n_paths / max(n_paths - 1, 1)
    times = np.arange(n_checkpoints + 1) * every * config.dt
    return EnsembleSummary(times, mean.T, np.sqrt(var / n_paths).T, n_paths, names)


def purity_defect(rho0, A, C, dt, horizon, n_paths, rng, scheme="milstein", project=False):
    """``1 - min_t tr(rho_t^2)`` per path of the diffusive filter."""
    cfg = SdeConfig(GeneratorSpec(A, [(C, np.pi / 4)]), dt, scheme, project)
    worst = np.ones(n_paths)
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (n_paths, 2, 2)).copy()
    sq = np.sqrt(dt)
    for _ in range(int(round(horizon / dt))):
        rho = step_diffusive(rho, A, C, dt, rng.normal(scale=sq, size=n_paths), scheme, cfg.projection)
        worst = np.minimum(worst, np.real(np.einsum("pij,pji->p", rho, rho)))
    return 1.0 - worst


def linear_nonlinear_gap(rho0, A, C, dt, horizon, n_paths, rng, scheme="milstein"):
    """Sup over time of the trace distance between the two filters on one record.

    The record ``dY`` is Brownian; the linear filter is driven by ``dY`` and
    the normalized filter by the innovation ``dW`` obtained from the link.
    Returns one value per path.
    """
    from .qstate import trace_distance

    xi = np.broadcast_to(np.asarray(rho0, dtype=complex), (n_paths,) + np.shape(rho0)).copy()
    rho = xi.copy()
    sup = np.zeros(n_paths)
    sq = np.sqrt(dt)
    for _ in range(int(round(horizon / dt))):
        dY = rng.normal(scale=sq, size=n_paths)
        xi, rl, dW = step_linear(xi, A, C, dt, dY, scheme)
        rho = step_diffusive(rho, A, C, dt, dW, scheme, project=False)
        sup = np.maximum(sup, trace_distance(rl, rho))
        # keep the un-normalized filter well scaled; the linear equation is homogeneous
        xi = xi / _tr(xi)[..., None, None]
    return sup


def expect_series(states, B):
    return expect(B, states)
