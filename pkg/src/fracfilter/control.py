"""Zero-sum control of the measured atom by backward induction on the chain.

Controls enter through the atom Hamiltonian ``H0 + u H1 + v H2`` and are
chosen after every measurement.  The payoff is the expected running cost
``tr(J rho)`` integrated over time plus the terminal cost ``tr(F rho_T)``.

With the Markov clock measurements happen every ``h``.  With the fractional
clock the k-th measurement happens at ``S_{kh}`` for a beta-stable
subordinator ``S``, so the count by time t is ``floor(sigma_t / h)`` with
``sigma`` the inverse subordinator.  The dynamic programme is indexed by the
number of measurements, and each measurement count carries two weights estimated by
Monte Carlo from the waiting times alone: the expected time spent in that
state before ``T`` and the probability of being in it at ``T``.  Policies
may then depend on the count and the state but not on the elapsed time;
this is an approximation scheme, checked against direct simulation.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.spatial
from scipy.special import gamma

from ._validation import (
    ShapeError,
    ValidationError,
    check_hermitian,
    check_positive,
    check_random_state,
)
from .chain import HamiltonianSpec, batch_outcomes
from .ctrw import TimeSeries, caputo_matrix, sample_stable
from .generators import GeneratorSpec, JUMP_TOL
from .qstate import (
    bloch_vector,
    commutator,
    from_bloch,
    expect,
)
from .sde import counting_drift, diffusion_coefficient, lindblad_drift

__all__ = [
    "ControlProblem",
    "BlochMesh",
    "SampleMesh",
    "ValueTable",
    "occupation_weights",
    "dp_solve",
    "constant_policy",
    "evaluate_policy_mc",
    "hjb_residual",
    "HjbReport",
]

# Bloch vectors longer than 1 + this are not states
EXTRAPOLATION_TOL = 1e-9


@dataclass(frozen=True)
class ControlProblem:
    """Controlled Hamiltonian ``H0 + u H1 + v H2``, cost operators and horizon.

    ``beta=None`` is the Markov clock (a measurement every ``h``).
    """

    H0: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    U: tuple
    V: tuple = (0.0,)
    J: np.ndarray = None
    F: np.ndarray = None
    T: float = 1.0
    beta: float = None

    def __post_init__(self):
        H0 = check_hermitian(self.H0, "H0")
        n = H0.shape[0]
        zero = np.zeros((n, n), dtype=complex)
        for name in ("H1", "H2", "J", "F"):
            val = zero if getattr(self, name) is None else check_hermitian(getattr(self, name), name)
            if val.shape != (n, n):
                raise ShapeError(f"{name} has shape {val.shape}, expected {(n, n)}")
            object.__setattr__(self, name, val)
        object.__setattr__(self, "H0", H0)
        U = tuple(float(u) for u in np.atleast_1d(self.U))
        V = tuple(float(v) for v in np.atleast_1d(self.V))
        if not U:
            raise ValidationError("control set U must be nonempty")
        if not V:
            raise ValidationError("control set V must be nonempty (use (0,) for pure control)")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        check_positive(self.T, "T")
        if self.beta is not None and not 0.0 < self.beta < 1.0:
            raise ValidationError(f"beta must lie in (0, 1) or be None, got {self.beta}")

    @property
    def dim(self):
        return self.H0.shape[0]

    def hamiltonian(self, iu, iv):
        return self.H0 + self.U[iu] * self.H1 + self.V[iv] * self.H2

    def with_controls(self, U=None, V=None):
        return ControlProblem(self.H0, self.H1, self.H2, self.U if U is None else U,
                              self.V if V is None else V, self.J, self.F, self.T, self.beta)


# -- meshes -------------------------------------------------------------------


def _fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    r = np.sqrt(1 - z * z)
    ang = np.pi * (3 - np.sqrt(5)) * k
    pts = np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)
    return np.vstack([pts, [[0, 0, 1.0], [0, 0, -1.0]]])


class BlochMesh:
    """Qubit mesh: a centre node plus shells of radius ``radii`` along fixed directions.

    A state with Bloch vector ``x`` is located in the cone of a spherical
    triangle of directions; inside the cone the value is interpolated
    linearly across the triangle and between the two bracketing shells.
    The rule reproduces affine functions of the Bloch vector exactly,
    including beyond the outer shell, where pure states sit between the
    flat faces and the sphere.
    """

    def __init__(self, n_dirs=60, radii=(0.25, 0.5, 0.75, 1.0)):
        radii = np.asarray(radii, dtype=float)
        if radii.ndim != 1 or radii.size == 0 or np.any(np.diff(radii) <= 0) or radii[0] <= 0:
            raise ValidationError("radii must be positive and increasing")
        self.dirs = _fibonacci_sphere(int(n_dirs))
        self.radii = radii
        hull = scipy.spatial.ConvexHull(self.dirs)
        self.triangles = hull.simplices
        self._inv = np.linalg.inv(self.dirs[self.triangles].transpose(0, 2, 1))  # (T, 3, 3)
        # a ray from the centre leaves the hull through the face maximizing n.x / -b
        eq = hull.equations
        self._exit = eq[:, :3] / -eq[:, 3:]
        # node 0 is the centre; shell s, direction i -> 1 + s * n_dirs + i
        pts = (radii[:, None, None] * self.dirs[None]).reshape(-1, 3)
        self.bloch = np.vstack([np.zeros(3), pts])
        self.points = from_bloch(self.bloch)

    def __len__(self):
        return self.bloch.shape[0]

    @property
    def dim(self):
        return 2

    def to_dict(self):
        return {"kind": "bloch", "n_dirs": int(self.dirs.shape[0] - 2), "radii": self.radii.tolist()}

    def weights(self, rhos, clip=True):
        """Sparse interpolation matrix ``(n_queries, n_nodes)`` for states ``rhos``.

        With ``clip`` a Bloch vector outside the ball (not a state) is
        reported and replaced by the nearest state; otherwise it is
        extrapolated linearly.
        """
        x = np.real(bloch_vector(np.asarray(rhos))).reshape(-1, 3)
        if clip:
            norm = np.linalg.norm(x, axis=1)
            out = norm > 1 + EXTRAPOLATION_TOL
            if np.any(out):
                warnings.warn(f"{np.count_nonzero(out)} states outside the Bloch ball; "
                              "using the nearest state", RuntimeWarning)
                x[out] /= norm[out, None]
        Q = x.shape[0]
        nd = self.dirs.shape[0]
        tri = np.argmax(x @ self._exit.T, axis=1)
        mu = np.einsum("qij,qj->qi", self._inv[tri], x)  # cone coordinates
        m = np.clip(mu, 0.0, None)
        rad = m.sum(axis=1)
        lam = np.where(rad[:, None] > 0, m / np.where(rad > 0, rad, 1.0)[:, None], 1.0 / 3)
        r_all = np.concatenate([[0.0], self.radii])
        s = np.clip(np.searchsorted(r_all, rad, side="right") - 1, 0, r_all.size - 2)
        tau = (rad - r_all[s]) / (r_all[s + 1] - r_all[s])
        verts = self.triangles[tri]  # (Q, 3)
        rows, cols, vals = [], [], []
        qi = np.arange(Q)
        for side, wside in ((s, 1.0 - tau), (s + 1, tau)):
            for c in range(3):
                node = np.where(side == 0, 0, 1 + (side - 1) * nd + verts[:, c])
                rows.append(qi)
                cols.append(node)
                vals.append(wside * lam[:, c])
        W = scipy.sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                    shape=(Q, len(self)))
        W.sum_duplicates()
        return W


class SampleMesh:
    """Fixed set of states with nearest-neighbour lookup (any dimension).

    Nearest-neighbour values are piecewise constant, so the dynamic
    programme is only first order in the mesh spacing.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=complex)
        self.points = pts
        flat = pts.reshape(len(pts), -1)
        self._tree = scipy.spatial.cKDTree(np.hstack([flat.real, flat.imag]))

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[-1]

    def to_dict(self):
        return {"kind": "sample", "re": self.points.real.tolist(), "im": self.points.imag.tolist()}

    def weights(self, rhos, clip=True):
        q = np.asarray(rhos, dtype=complex).reshape(-1, self.dim * self.dim)
        _, idx = self._tree.query(np.hstack([q.real, q.imag]))
        Q = q.shape[0]
        return scipy.sparse.csr_matrix((np.ones(Q), (np.arange(Q), idx)), shape=(Q, len(self)))


def _mesh_from_dict(d):
    if d["kind"] == "bloch":
        return BlochMesh(d["n_dirs"], d["radii"])
    return SampleMesh(np.asarray(d["re"]) + 1j * np.asarray(d["im"]))


# -- clock weights ------------------------------------------------------------------


def _stable_waits(beta, h, rng, size):
    """Waits ``h^(1/beta) Z`` between measurements: the k-th one falls at ``S_{kh}``.

    The count by time t is then ``floor(sigma_t / h)``, the subordinated clock.
    """
    return h ** (1.0 / beta) * sample_stable(beta, rng, size)


def occupation_weights(beta, h, T, n_samples=100_000, rng=None):
    """Per measurement count ``k``: expected time spent with ``k`` measurements
    done before ``T`` and the probability of exactly ``k`` by ``T``.

    ``beta=None`` gives the Markov clock: ``occ = h`` for ``k < T/h`` and the
    terminal mass sits at ``k = T/h``.  Otherwise measurements fall at
    ``S_h, S_2h, ...`` of a stable subordinator (see :func:`_stable_waits`).
    """
    if beta is None:
        N = int(round(T / h))
        if not np.isclose(N * h, T, rtol=1e-9, atol=0):
            raise ValidationError(f"T={T} is not a multiple of h={h}")
        occ = np.full(N + 1, h)
        occ[-1] = 0.0
        term = np.zeros(N + 1)
        term[-1] = 1.0
        return occ, term
    rng = check_random_state(rng)
    occ = np.zeros(16)
    term = np.zeros(16)
    clock = np.zeros(n_samples)
    live = np.arange(n_samples)
    k = 0
    while live.size:
        if k >= occ.size:
            occ = np.concatenate([occ, np.zeros(occ.size)])
            term = np.concatenate([term, np.zeros(term.size)])
        nxt = clock[live] + _stable_waits(beta, h, rng, live.size)
        occ[k] = np.sum(np.minimum(nxt, T) - clock[live]) / n_samples
        done = nxt > T
        term[k] = np.count_nonzero(done) / n_samples
        clock[live] = nxt
        live = live[~done]
        k += 1
    return occ[:k], term[:k]


# -- dynamic programming ---------------------------------------------------------------


@dataclass
class ValueTable:
    """Values on mesh nodes per measurement count (``values[k]``).

    ``values`` is the max-min recursion.  ``upper[k]`` is the min-max of
    the same one-step payoff matrix (same continuation ``values[k+1]``),
    so ``upper - values`` measures the Isaacs gap layer by layer.
    """

    problem: ControlProblem
    spec: GeneratorSpec
    h: float
    mesh: object
    values: np.ndarray
    upper: np.ndarray
    occupation: np.ndarray
    terminal: np.ndarray
    method: str = "exact"
    _trans: dict = field(default=None, repr=False)

    @property
    def n_layers(self):
        return self.values.shape[0]

    def value(self, rho, k=0):
        """Interpolated max-min value of state(s) ``rho`` at count ``k``."""
        rho = np.asarray(rho)
        W = self.mesh.weights(rho, clip=False)
        return (W @ self.values[k]).reshape(rho.shape[:-2])

    def isaacs_gap(self):
        """``min-max - max-min`` on all nodes and layers (should be >= 0)."""
        return self.upper - self.values

    def q_values(self, k, rhos):
        """``(Q, |U|, |V|)`` one-step values for states at count ``k``."""
        rhos = np.asarray(rhos, dtype=complex).reshape(-1, self.problem.dim, self.problem.dim)
        k = min(int(k), self.n_layers - 1)
        nxt = self.values[k + 1] if k + 1 < self.n_layers else np.zeros(len(self.mesh))
        base = self.occupation[k] * np.real(expect(self.problem.J, rhos)) \
            + self.terminal[k] * np.real(expect(self.problem.F, rhos))
        out = np.empty((rhos.shape[0], len(self.problem.U), len(self.problem.V)))
        for iu in range(len(self.problem.U)):
            for iv in range(len(self.problem.V)):
                hs = HamiltonianSpec(self.problem.hamiltonian(iu, iv), self.spec.channels)
                p, post = batch_outcomes(rhos, hs, self.h, self.method)
                W = self.mesh.weights(post.reshape(-1, self.problem.dim, self.problem.dim))
                vals = (W @ nxt).reshape(p.shape)
                out[:, iu, iv] = base + np.sum(p * vals, axis=1)
        return out

    def policy(self):
        """Feedback policy from one-step lookahead on the max-min values."""
        def act(k, rhos):
            q = self.q_values(k, rhos)
            return _saddle(q)[1:]

        return act

    def to_json(self):
        p = self.problem
        cm = lambda M: {"re": np.real(M).tolist(), "im": np.imag(M).tolist()}
        d = {
            "problem": {"H0": cm(p.H0), "H1": cm(p.H1), "H2": cm(p.H2), "U": list(p.U), "V": list(p.V),
                        "J": cm(p.J), "F": cm(p.F), "T": p.T, "beta": p.beta},
            "channels": [{"C": cm(c.C), "phi": c.phi} for c in self.spec.channels],
            "A": cm(self.spec.A),
            "h": self.h,
            "method": self.method,
            "mesh": self.mesh.to_dict(),
            "values": self.values.tolist(),
            "upper": self.upper.tolist(),
            "occupation": self.occupation.tolist(),
            "terminal": self.terminal.tolist(),
        }
        return json.dumps(d)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        cm = lambda x: np.asarray(x["re"]) + 1j * np.asarray(x["im"])
        q = d["problem"]
        prob = ControlProblem(cm(q["H0"]), cm(q["H1"]), cm(q["H2"]), q["U"], q["V"], cm(q["J"]),
                              cm(q["F"]), q["T"], q["beta"])
        spec = GeneratorSpec(cm(d["A"]), [(cm(c["C"]), c["phi"]) for c in d["channels"]])
        return cls(prob, spec, d["h"], _mesh_from_dict(d["mesh"]), np.asarray(d["values"]),
                   np.asarray(d["upper"]), np.asarray(d["occupation"]), np.asarray(d["terminal"]),
                   d["method"])


def _saddle(q):
    """Max-min value and the (lowest-index) maximizing u and minimizing v.

    ``q`` has shape ``(..., |U|, |V|)``.  ``argmax``/``argmin`` return the
    first optimum, which is the tie-break rule.
    """
    inner = q.min(axis=-1)
    iu = np.argmax(inner, axis=-1)
    row = np.take_along_axis(q, iu[..., None, None], axis=-2)[..., 0, :]
    iv = np.argmin(row, axis=-1)
    return inner.max(axis=-1), iu, iv


def _transitions(problem, spec, h, mesh, method):
    """Sparse one-step transition matrices on the mesh per control pair."""
    out = {}
    pts = mesh.points
    n = problem.dim
    for iu in range(len(problem.U)):
        for iv in range(len(problem.V)):
            hs = HamiltonianSpec(problem.hamiltonian(iu, iv), spec.channels)
            p, post = batch_outcomes(pts, hs, h, method)
            W = mesh.weights(post.reshape(-1, n, n))
            M, nw = p.shape
            # row i collects sum_w p_iw * weights(post_iw)
            P = scipy.sparse.csr_matrix(
                (p.reshape(-1), (np.repeat(np.arange(M), nw), np.arange(M * nw))), shape=(M, M * nw)
            )
            out[iu, iv] = (P @ W).tocsr()
    return out


def dp_solve(problem, spec, h, mesh, n_weight_samples=100_000, rng=None, method="exact",
             transitions=None):
    """Backward induction for the max-min value on ``mesh``.

    The spec supplies the measurement channels; its Hamiltonian is replaced
    by the controlled one.  Layer ``k`` holds the value after ``k``
    measurements; the last layer is ``tr(F rho)`` at the mesh nodes.
    """
    spec = GeneratorSpec.of(spec)
    check_positive(h, "h")
    rng = check_random_state(rng)
    occ, term = occupation_weights(problem.beta, h, problem.T, n_weight_samples, rng)
    trans = transitions if transitions is not None else _transitions(problem, spec, h, mesh, method)
    pts = mesh.points
    Jv = np.real(expect(problem.J, pts))
    Fv = np.real(expect(problem.F, pts))
    L = occ.size
    nU, nV = len(problem.U), len(problem.V)
    lo = np.empty((L, len(mesh)))
    hi = np.empty((L, len(mesh)))
    lo[-1] = occ[-1] * Jv + term[-1] * Fv
    hi[-1] = lo[-1]
    q_lo = np.empty((len(mesh), nU, nV))
    for k in range(L - 2, -1, -1):
        base = occ[k] * Jv + term[k] * Fv
        for (iu, iv), P in trans.items():
            q_lo[:, iu, iv] = base + P @ lo[k + 1]
        lo[k] = q_lo.min(axis=2).max(axis=1)
        hi[k] = q_lo.max(axis=1).min(axis=1)
    table = ValueTable(problem, spec, h, mesh, lo, hi, occ, term, method)
    table._trans = trans
    return table


def constant_policy(iu=0, iv=0):
    """Policy always playing control indices ``(iu, iv)``."""
    def act(k, rhos):
        m = np.shape(rhos)[0]
        return np.full(m, iu), np.full(m, iv)

    return act


def evaluate_policy_mc(problem, spec, h, policy, rho0, n_paths, rng=None, method="exact"):
    """Monte Carlo payoff ``E[int_0^T tr(J rho_s) ds + tr(F rho_T)]`` of a policy.

    Chains are advanced one measurement at a time; with a fractional clock
    each path draws its own waiting times.  Returns ``(mean, stderr)``.
    """
    spec = GeneratorSpec.of(spec)
    rng = check_random_state(rng)
    n = problem.dim
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (n_paths, n, n)).copy()
    payoff = np.zeros(n_paths)
    if problem.beta is None:
        N = int(round(problem.T / h))
        clock_next = None
    else:
        clock = np.zeros(n_paths)
        clock_next = clock + _stable_waits(problem.beta, h, rng, n_paths)
    live = np.arange(n_paths)
    k = 0
    while live.size:
        r = rho[live]
        if clock_next is None:
            stay = np.full(live.size, h if k < N else 0.0)
            ends = np.full(live.size, k >= N)
        else:
            stay = np.minimum(clock_next[live], problem.T) - clock[live]
            ends = clock_next[live] > problem.T
        payoff[live] += stay * np.real(expect(problem.J, r))
        fin = live[ends]
        payoff[fin] += np.real(expect(problem.F, rho[fin]))
        live = live[~ends]
        if not live.size:
            break
        iu, iv = policy(k, rho[live])
        u_draw = rng.random(live.size)
        for a in range(len(problem.U)):
            for b in range(len(problem.V)):
                sel = live[(iu == a) & (iv == b)]
                if not sel.size:
                    continue
                hs = HamiltonianSpec(problem.hamiltonian(a, b), spec.channels)
                p, post = batch_outcomes(rho[sel], hs, h, method)
                choice = (np.cumsum(p, axis=1) < u_draw[np.searchsorted(live, sel), None]).sum(axis=1)
                choice = np.minimum(choice, p.shape[1] - 1)
                rho[sel] = post[np.arange(sel.size), choice]
        if clock_next is not None:
            clock[live] = clock_next[live]
            clock_next[live] = clock[live] + _stable_waits(problem.beta, h, rng, live.size)
        k += 1
    return float(payoff.mean()), float(payoff.std(ddof=1) / np.sqrt(n_paths))


# -- HJB-Isaacs residual ------------------------------------------------------------------


@dataclass
class HjbReport:
    """Residual of the fractional HJB-Isaacs equation at probe states.

    ``residual[i, p]`` is at remaining horizon ``grid[i + 1]`` and probe ``p``;
    ``budget`` combines the time-discretization estimate (grid halving) and
    the spatial finite-difference estimate (step halving).

    ``residual_time_changed`` replaces the running cost ``tr(J rho)`` by
    ``t^(1-beta)/Gamma(2-beta) tr(J rho)``, which is what the Laplace
    transform of an integral cost under the time change gives; the two
    coincide in the Markov case.
    """

    grid: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    residual: np.ndarray
    budget: np.ndarray
    residual_time_changed: np.ndarray = None

    def to_csv(self, path=None):
        lines = ["horizon,probe,caputo,hamiltonian,residual,budget,residual_time_changed"]
        tc = self.residual if self.residual_time_changed is None else self.residual_time_changed
        for i, t in enumerate(self.grid):
            for p in range(self.residual.shape[1]):
                lines.append(",".join([repr(float(t)), str(p), repr(float(self.lhs[i, p])),
                                       repr(float(self.rhs[i, p])), repr(float(self.residual[i, p])),
                                       repr(float(self.budget[i, p])), repr(float(tc[i, p]))]))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _directional(Sfun, rho, X, eps):
    return (Sfun(rho + eps * X) - Sfun(rho - eps * X)) / (2 * eps)


def _second_directional(Sfun, rho, X, eps):
    return (Sfun(rho + eps * X) - 2 * Sfun(rho) + Sfun(rho - eps * X)) / (eps * eps)


def _hamiltonian_side(problem, spec, Sfun, rho, eps):
    """``max_u + min_v`` control terms, running cost and ``L_mix`` applied to ``S``."""
    A = problem.H0
    dS = lambda X: _directional(Sfun, rho, X, eps)
    cu = [dS(1j * commutator(rho, u * problem.H1)) for u in problem.U]
    cv = [dS(1j * commutator(rho, v * problem.H2)) for v in problem.V]
    val = max(cu) + min(cv) + float(np.real(expect(problem.J, rho)))
    cnt = [c.C for c in spec.channels if c.counting]
    dif = [c.C for c in spec.channels if not c.counting]
    # drift: Hamiltonian part once, then each channel's own drift
    drift = -1j * commutator(A, rho)
    for C in cnt:
        drift = drift + counting_drift(rho, np.zeros_like(A), [C])
        w = float(np.real(np.trace(C @ rho @ C.conj().T)))
        if w > JUMP_TOL:
            val += w * (Sfun(C @ rho @ C.conj().T / w) - Sfun(rho))
    for C in dif:
        drift = drift + lindblad_drift(rho, np.zeros_like(A), [C])
        D = diffusion_coefficient(rho, C)
        val += 0.5 * _second_directional(Sfun, rho, D, eps)
    return val + dS(drift)


def hjb_residual(problem, spec, h, mesh, grid, probes, eps=0.02, n_weight_samples=100_000,
                 rng=None, method="exact"):
    """Residual of ``D^beta S = max_u + min_v + tr(J rho) + L_mix S`` at probe states.

    ``S`` at remaining horizon ``t`` comes from :func:`dp_solve` with
    horizon ``t`` (``grid`` uniform from 0); the Caputo derivative uses the
    L1 scheme (``beta=None`` gives the backward difference); spatial
    derivatives are central differences of the interpolated value.  The
    running cost is read as ``tr(J rho)`` at the evaluation state.
    """
    spec = GeneratorSpec.of(spec)
    rng = check_random_state(rng)
    grid = np.asarray(grid, dtype=float)
    TimeSeries(grid, grid)  # uniform-grid check
    probes = np.asarray(probes, dtype=complex)
    trans = _transitions(problem, spec, h, mesh, method)
    S = np.empty((grid.size, len(probes)))
    tables = []
    for i, t in enumerate(grid):
        if t == 0:
            S[i] = np.real(expect(problem.F, probes))
            tables.append(None)
            continue
        p = ControlProblem(problem.H0, problem.H1, problem.H2, problem.U, problem.V, problem.J,
                           problem.F, t, problem.beta)
        tab = dp_solve(p, spec, h, mesh, n_weight_samples, rng, method, transitions=trans)
        tables.append(tab)
        S[i] = tab.value(probes)
    b = 1.0 if problem.beta is None else problem.beta
    d = grid[1] - grid[0]
    lhs = np.diff(S, axis=0).T @ caputo_matrix(grid.size, d, b).T  # (P, N)
    lhs = lhs.T
    rhs = np.empty_like(lhs)
    rhs_half = np.empty_like(lhs)
    for i in range(1, grid.size):
        Sfun = lambda r, tab=tables[i]: float(tab.value(r)) if tab is not None else \
            float(np.real(expect(problem.F, r)))
        for q, rho in enumerate(probes):
            rhs[i - 1, q] = _hamiltonian_side(problem, spec, Sfun, rho, eps)
            rhs_half[i - 1, q] = _hamiltonian_side(problem, spec, Sfun, rho, eps / 2)
    res = lhs - rhs
    # time discretization: L1 on the grid with every other point
    coarse = np.diff(S[::2], axis=0).T @ caputo_matrix(S[::2].shape[0], 2 * d, b).T
    t_err = np.zeros_like(lhs)
    t_err[1::2] = np.abs(coarse.T - lhs[1::2])
    t_err[0::2] = t_err[np.minimum(np.arange(0, lhs.shape[0], 2) + 1, lhs.shape[0] - 1)]
    budget = t_err + np.abs(rhs - rhs_half)
    jv = np.real(expect(problem.J, probes))
    src = grid[1:, None] ** (1 - b) / gamma(2 - b)
    return HjbReport(grid[1:], lhs, rhs, res, budget, res + jv[None, :] * (1 - src))
