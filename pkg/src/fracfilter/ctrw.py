"""Heavy-tailed waiting times, stable subordinators and Caputo operators.

Normalizations
--------------
Subordinators are standard: ``E exp(-lam S_t) = exp(-t lam^beta)``, so the
subordinated expectation ``g(t) = E f(rho_{sigma_t})`` solves the Caputo
equation ``D^beta g = L g``.

The Levy measure ``y^{-1-beta} dy`` has Laplace exponent
``Gamma(1-beta)/beta * lam^beta``; accordingly the mixed operator
:func:`mixed_caputo` built from ``nu(ds) = s^{-1-beta} ds`` satisfies
``D^(nu) = -(Gamma(1-beta)/beta) D^beta``.

The waiting law ``P(T > m) = (1 + beta^{1/beta} m)^{-beta}`` has tail
``m^{-beta}/beta``.  With ``scale = h beta / Gamma(1-beta)``
(:func:`ctrw_waiting_law`) the number of events by time t, multiplied by
``h``, converges to the standard inverse subordinator ``sigma_t``.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import gamma

from ._validation import RangeError, ValidationError, check_positive, check_random_state


# -- waiting laws ---------------------------------------------------------------


@dataclass(frozen=True)
class WaitingLaw:
    """Distribution of the time between measurements.

    Use the constructors :meth:`degenerate`, :meth:`exponential`,
    :meth:`stable_tail` and :meth:`mixture`.
    """

    kind: str
    h: float = None
    rate: float = None
    beta: float = None
    scale: float = 1.0
    components: tuple = ()

    @classmethod
    def degenerate(cls, h):
        return cls("degenerate", h=check_positive(h, "h"))

    @classmethod
    def exponential(cls, rate):
        return cls("exponential", rate=check_positive(rate, "rate"))

    @classmethod
    def stable_tail(cls, beta, scale=1.0):
        _check_beta(beta)
        return cls("stable_tail", beta=float(beta), scale=check_positive(scale, "scale"))

    @classmethod
    def mixture(cls, components, scale=1.0):
        """``components`` is a sequence of ``(weight, beta)`` pairs."""
        comps = tuple((float(w), float(b)) for w, b in components)
        if not comps:
            raise ValidationError("mixture needs at least one component")
        for w, b in comps:
            _check_beta(b)
            if w <= 0:
                raise ValidationError(f"mixture weights must be positive, got {w}")
        if abs(sum(w for w, _ in comps) - 1.0) > 1e-12:
            raise ValidationError("mixture weights must sum to 1")
        return cls("mixture", scale=check_positive(scale, "scale"), components=comps)

    @property
    def natural_step(self):
        if self.kind == "degenerate":
            return self.h
        if self.kind == "exponential":
            return 1.0 / self.rate
        return None

    def survival(self, m):
        """``P(T > m)`` of the unscaled variable (stable_tail only)."""
        b = self.beta
        return (1.0 + b ** (1.0 / b) * np.asarray(m, dtype=float)) ** (-b)

    def sample(self, rng=None, size=None):
        return sample_waiting(self, rng, size)


def _check_beta(beta):
    if not 0.0 < beta < 1.0:
        raise ValidationError(f"beta must lie in (0, 1), got {beta}")


def _pareto_like(beta, rng, size):
    u = 1.0 - rng.random(size)  # (0, 1]
    return (u ** (-1.0 / beta) - 1.0) / beta ** (1.0 / beta)


def sample_waiting(law, rng=None, size=None):
    """Draw waiting times; stable-tail draws are ``scale^{1/beta} T``."""
    rng = check_random_state(rng)
    if law.kind == "degenerate":
        return law.h if size is None else np.full(size, law.h)
    if law.kind == "exponential":
        return rng.exponential(1.0 / law.rate, size)
    if law.kind == "stable_tail":
        return law.scale ** (1.0 / law.beta) * _pareto_like(law.beta, rng, size)
    if law.kind == "mixture":
        w = np.array([c[0] for c in law.components])
        b = np.array([c[1] for c in law.components])
        k = rng.choice(len(w), p=w, size=size)
        bk = b[k]
        u = 1.0 - rng.random(size)
        return law.scale ** (1.0 / bk) * (u ** (-1.0 / bk) - 1.0) / bk ** (1.0 / bk)
    raise ValidationError(f"unknown waiting law kind {law.kind!r}")


def ctrw_waiting_law(beta, h):
    """Stable-tail law whose event counts ``h N_t`` approach ``sigma_t``."""
    return WaitingLaw.stable_tail(beta, scale=h * beta / gamma(1.0 - beta))


def ctrw_counts(law, t, n_samples, rng=None):
    """``N_t = max{n : T_1 + ... + T_n <= t}`` for independent walks."""
    rng = check_random_state(rng)
    clock = np.zeros(n_samples)
    counts = np.zeros(n_samples, dtype=np.int64)
    live = np.arange(n_samples)
    while live.size:
        clock[live] += np.asarray(sample_waiting(law, rng, live.size))
        ok = clock[live] <= t
        counts[live[ok]] += 1
        live = live[ok]
    return counts


# -- stable subordinators ---------------------------------------------------------


def sample_stable(beta, rng=None, size=None):
    """Standard positive beta-stable variables, ``E exp(-lam Z) = exp(-lam^beta)``.

    Kanter's representation with ``U ~ Unif(0, pi)`` and ``E ~ Exp(1)``.
    """
    _check_beta(beta)
    rng = check_random_state(rng)
    U = rng.uniform(0.0, np.pi, size)
    E = rng.exponential(1.0, size)
    a = np.sin(beta * U) / np.sin(U) ** (1.0 / beta)
    return a * (np.sin((1.0 - beta) * U) / E) ** ((1.0 - beta) / beta)


@dataclass
class SubordinatorPath:
    grid: np.ndarray
    values: np.ndarray
    beta: float

    def __post_init__(self):
        if self.values[0] != 0 or np.any(np.diff(self.values) < 0):
            raise ValidationError("subordinator path must start at 0 and be nondecreasing")


def simulate_subordinator(beta, t_grid, rng=None):
    """Exact stable increments ``dt^{1/beta} Z`` on each grid cell.

    ``t_grid`` must start at 0.  Paths for several independent copies can
    be drawn with :func:`simulate_subordinators`.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0 or np.any(np.diff(t_grid) <= 0):
        raise ValidationError("t_grid must start at 0 and strictly increase")
    dts = np.diff(t_grid)
    inc = dts ** (1.0 / beta) * sample_stable(beta, rng, dts.size)
    return SubordinatorPath(t_grid, np.concatenate([[0.0], np.cumsum(inc)]), float(beta))


def simulate_subordinators(beta, dt, n_steps, n_paths, rng=None):
    """Array ``(n_paths, n_steps + 1)`` of subordinator values on a uniform grid."""
    inc = dt ** (1.0 / beta) * sample_stable(beta, rng, (n_paths, n_steps))
    return np.concatenate([np.zeros((n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)


def inverse_subordinator(path, t):
    """``sigma_t = max{s : S_s <= t}`` on the sampled grid.

    Raises
    ------
    RangeError
        If ``t`` is not below the last sampled value (extend the path).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise RangeError("sigma_t is defined for t >= 0")
    if np.any(t >= path.values[-1]):
        raise RangeError(f"t={np.max(t):.4g} exceeds the path range {path.values[-1]:.4g}")
    idx = np.searchsorted(path.values, t, side="right") - 1
    out = path.grid[idx]
    return float(out) if out.ndim == 0 else out


def inverse_marginal(beta, t, S1):
    """Exact marginal sample of ``sigma_t`` from draws of ``S_1``: ``(t/S_1)^beta``."""
    return (np.asarray(t, dtype=float)[..., None] / np.asarray(S1)) ** beta


# -- time series and Caputo operators ------------------------------------------


@dataclass
class TimeSeries:
    """Values on a uniform grid ``0, d, ..., N d``."""

    grid: np.ndarray
    values: np.ndarray
    stderr: np.ndarray = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values)
        d = np.diff(self.grid)
        if d.size and np.max(np.abs(d - d[0])) > 1e-9 * max(abs(d[0]), 1e-300):
            raise ValidationError("TimeSeries grid must be uniform")

    @property
    def step(self):
        return float(self.grid[1] - self.grid[0])

    def to_csv(self, path=None, name="value"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", name] + (["stderr"] if self.stderr is not None else []))
        for i, t in enumerate(self.grid):
            row = [repr(float(t)), repr(float(np.real(self.values[i])))]
            if self.stderr is not None:
                row.append(repr(float(self.stderr[i])))
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _series(series):
    if not isinstance(series, TimeSeries):
        raise ValidationError("expected a TimeSeries")
    if series.grid.size < 3:
        raise ValidationError("Caputo discretization needs at least 3 grid points")
    return series


def caputo_matrix(n_points, d, beta):
    """L1 weights acting on first differences.

    ``(D^beta f)(t_n) = sum_j W[n-1, j] (f_{j+1} - f_j)`` for ``n = 1..N``.
    Working on differences makes constants map to exactly 0.  The scheme is
    exact for piecewise-linear ``f`` and first order in general.
    """
    N = n_points - 1
    k = np.arange(N + 1, dtype=float)
    b = k[1:] ** (1 - beta) - k[:-1] ** (1 - beta)  # b_0 .. b_{N-1}
    b[0] = 1.0  # 0**0 would give 0 at beta = 1
    # W[n-1, j] = b_{n-1-j} for j < n
    W = scipy.linalg.toeplitz(b, np.zeros(N))
    return W * d ** (-beta) / gamma(2 - beta)


def caputo_derivative(series, beta):
    """L1 discretization of the Caputo derivative of order ``beta`` on grid points 1..N."""
    s = _series(series)
    if not 0.0 < beta <= 1.0:
        raise ValidationError(f"beta must lie in (0, 1], got {beta}")
    W = caputo_matrix(s.grid.size, s.step, beta)
    return TimeSeries(s.grid[1:], W @ np.diff(s.values))


def mixed_caputo(series, law):
    """``D^(nu) f_t = int_0^t (f_{t-s} - f_t) nu(ds) + (f_0 - f_t) nu((t, inf))``.

    ``nu(ds) = sum_i w_i s^{-1-beta_i} ds`` from a mixture waiting law.  The
    piecewise-linear interpolant of ``f`` is integrated exactly against the
    kernel, and the tail uses ``nu((t, inf)) = sum_i w_i t^{-beta_i}/beta_i``.
    For one component this equals ``-(Gamma(1-beta)/beta)`` times
    :func:`caputo_derivative`.
    """
    s = _series(series)
    if law.kind == "stable_tail":
        comps = ((1.0, law.beta),)
    elif law.kind == "mixture":
        comps = law.components
    else:
        raise ValidationError("mixed_caputo needs a stable or mixture law")
    f = np.asarray(s.values)
    d = s.step
    N = f.size - 1
    out = np.zeros(N, dtype=f.dtype)
    for w, b in comps:
        out = out + w * _mixed_single(f, d, b)
    return TimeSeries(s.grid[1:], out)


def _mixed_single(f, d, beta):
    N = f.size - 1
    k = np.arange(1, N + 1, dtype=float)
    sk, sk1 = d * (k - 1), d * k
    with np.errstate(divide="ignore"):
        I0 = np.where(k > 1, (np.where(sk > 0, sk, 1.0) ** (-beta) - sk1 ** (-beta)) / beta, 0.0)
    J = (sk1 ** (1 - beta) - sk ** (1 - beta)) / (1 - beta)  # int s^{-beta}
    I1 = J - sk * I0  # int (s - s_k) s^{-1-beta}, cell k-1 -> k
    out = np.empty(N, dtype=f.dtype)
    for n in range(1, N + 1):
        g = f[n::-1][: n + 1] - f[n]  # g(s_j) = f(t_n - s_j) - f(t_n), j = 0..n
        slope = (g[1:] - g[:-1]) / d
        val = np.sum(g[:-1][1:] * I0[1:n]) + np.sum(slope * I1[:n])
        out[n - 1] = val + (f[0] - f[n]) * (d * n) ** (-beta) / beta
    return out


def verify_fractional_equation(g, Lg, beta):
    """Sup-norm relative residual of ``D^beta g = L g`` and the per-point table."""
    D = caputo_derivative(g, beta)
    Lv = np.asarray(Lg.values if isinstance(Lg, TimeSeries) else Lg)
    Lv = Lv[1:] if Lv.size == g.grid.size else Lv
    res = D.values - Lv
    scale = np.max(np.abs(Lv))
    rel = float(np.max(np.abs(res)) / scale) if scale > 0 else float(np.max(np.abs(res)))
    return ResidualReport(D.grid, D.values, Lv, res, rel)


@dataclass
class ResidualReport:
    grid: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    residual: np.ndarray
    relative_sup: float
    budget: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "caputo", "generator", "residual", "budget"])
        for i, t in enumerate(self.grid):
            bud = "" if self.budget is None else repr(float(self.budget[i]))
            w.writerow([repr(float(t)), repr(float(self.lhs[i])), repr(float(self.rhs[i])), repr(float(self.residual[i])), bud])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_json(self):
        return json.dumps({"relative_sup": self.relative_sup, **self.extra})


# -- subordinated filtering ---------------------------------------------------


@dataclass
class SubordinatedResult:
    """Monte Carlo output of :func:`subordinated_expectation`.

    ``f_paths`` and ``Lf_paths`` hold per-path values on the grid (when kept).
    """

    series: TimeSeries
    generator: TimeSeries = None
    f_paths: np.ndarray = None
    Lf_paths: np.ndarray = None


def _inverse_times(beta, t_grid, n, rng, coupling, sub_dt):
    if beta is None or beta >= 1.0:
        return np.broadcast_to(t_grid, (n, t_grid.size)).copy()
    if coupling == "scaling":
        S1 = sample_stable(beta, rng, n)
        return (t_grid[None, :] / S1[:, None]) ** beta
    if coupling == "path":
        out = np.empty((n, t_grid.size))
        tmax = t_grid[-1]
        for p in range(n):
            # extend (never redraw) until the path passes tmax; redrawing would bias toward big jumps
            S = simulate_subordinators(beta, sub_dt, 1024, 1, rng)[0]
            while S[-1] <= tmax:
                more = simulate_subordinators(beta, sub_dt, S.size - 1, 1, rng)[0][1:]
                S = np.concatenate([S, S[-1] + more])
            idx = np.searchsorted(S, t_grid, side="right") - 1
            out[p] = idx * sub_dt
        return out
    raise ValidationError(f"unknown coupling {coupling!r}")


def subordinated_expectation(f, rho0, spec, beta, t_grid, n_paths, rng=None, dt=1e-3,
                             coupling="scaling", with_generator=False, keep_paths=False,
                             chunk_size=10000, scheme="milstein", sub_dt=1e-3, inner="sde"):
    """``g(t) = E f(rho_{sigma_t})`` with an independent inverse subordinator.

    Each path integrates the filter SDE on its internal clock and reads
    ``f`` at internal time ``sigma_t`` (linear interpolation between SDE
    steps).  ``coupling="scaling"`` draws ``sigma_t = (t/S_1)^beta``, which has
    the exact one-time marginal law; ``coupling="path"`` inverts a simulated
    subordinator path on a grid of step ``sub_dt``.  ``beta=None`` or 1 gives
    the Markov case ``sigma_t = t``.

    With ``with_generator`` the same paths also yield
    ``E (L f)(rho_{sigma_t})``.

    ``inner="exact"`` (linear ``f`` only) replaces the filter trajectory by
    its conditional mean given ``sigma``: for linear ``f``,
    ``E[f(rho_s)] = f(exp(sL) rho0)`` exactly, so only the subordinator is
    sampled.  This is the same expectation with far smaller variance.
    """
    from .generators import GeneratorSpec, eval_mix
    from .sde import SdeConfig

    rng = check_random_state(rng)
    spec = GeneratorSpec.of(spec)
    t_grid = np.asarray(t_grid, dtype=float)
    cfg = SdeConfig(spec, dt, scheme, True)
    nobs = 2 if with_generator else 1

    def observe(r):
        vals = f(r)
        return np.stack([vals, eval_mix(f, r, spec)], axis=-1) if with_generator else vals[..., None]

    if inner not in ("sde", "exact"):
        raise ValidationError(f"inner must be 'sde' or 'exact', got {inner!r}")
    if inner == "exact" and f.degree > 1:
        raise ValidationError("inner='exact' needs a test function of degree <= 1")
    parts = []
    done = 0
    while done < n_paths:
        m = min(chunk_size, n_paths - done)
        sig = _inverse_times(beta, t_grid, m, rng, coupling, sub_dt)
        if inner == "sde":
            parts.append(_sample_at_times(rho0, cfg, sig, observe, nobs, rng))
        else:
            parts.append(_exact_at_times(rho0, spec, sig, observe, dt))
        done += m
    vals = np.concatenate(parts)  # (paths, times, nobs)
    F = vals[..., 0]
    g = TimeSeries(t_grid, F.mean(axis=0), F.std(axis=0, ddof=1) / np.sqrt(n_paths))
    out = SubordinatedResult(g, f_paths=F if keep_paths else None)
    if with_generator:
        L = vals[..., 1]
        out.generator = TimeSeries(t_grid, L.mean(axis=0), L.std(axis=0, ddof=1) / np.sqrt(n_paths))
        if keep_paths:
            out.Lf_paths = L
    return out


def _exact_at_times(rho0, spec, sig, observe, ds):
    """Observations of the Lindblad solution at times ``sig`` (linear interpolation on step ``ds``)."""
    from .qstate import liouvillian

    n = np.shape(rho0)[-1]
    steps = int(np.ceil(sig.max() / ds)) + 1
    P = scipy.linalg.expm(liouvillian(spec.A, spec.Cs) * ds)
    v = np.empty((steps + 1, n * n), dtype=complex)
    v[0] = np.asarray(rho0, dtype=complex).reshape(-1)
    for k in range(steps):
        v[k + 1] = P @ v[k]
    table = observe(v.reshape(steps + 1, n, n))  # (steps+1, nobs)
    pos = sig / ds
    lo = np.minimum(np.floor(pos).astype(np.int64), steps - 1)
    fr = (pos - lo)[..., None]
    return table[lo] * (1 - fr) + table[lo + 1] * fr


def _sample_at_times(rho0, cfg, sig, observe, nobs, rng):
    """Observations at internal times ``sig`` (paths x times), linearly interpolated.

    Values are gathered while the batch is integrated, touching only the
    paths that need a reading at the current step.
    """
    from .sde import simulate_batch

    m, nt = sig.shape
    dt = cfg.dt
    steps = int(np.ceil(sig.max() / dt)) + 1
    pos = sig / dt
    lo = np.minimum(np.floor(pos).astype(np.int64), steps - 1)
    frac = (pos - lo).ravel()
    order = np.argsort(lo.ravel(), kind="stable")
    lo_sorted = lo.ravel()[order]
    starts = np.searchsorted(lo_sorted, np.arange(steps + 2))
    acc = np.zeros((m * nt, nobs))

    def take(k, rho):
        for j, wfun in ((k, lambda fr: 1.0 - fr), (k - 1, lambda fr: fr)):
            if j < 0:
                continue
            sel = order[starts[j]:starts[j + 1]]
            if sel.size:
                paths = sel // nt
                acc[sel] += wfun(frac[sel])[:, None] * observe(rho[paths])

    simulate_batch(rho0, cfg, steps, m, rng, callback=take)
    return acc.reshape(m, nt, nobs)


def fractional_residual_paths(f_paths, Lf_paths, grid, beta):
    """Per-point mean and standard error of ``L1(f(rho_{sigma_.}))(t) - (Lf)(rho_{sigma_t})``.

    The Caputo scheme is linear, so the mean equals the residual of the
    averaged series; the per-path values give its Monte Carlo error.
    """
    d = float(grid[1] - grid[0])
    W = caputo_matrix(len(grid), d, beta)
    r = np.diff(f_paths, axis=1) @ W.T - Lf_paths[:, 1:]
    n = r.shape[0]
    return r.mean(axis=0), r.std(axis=0, ddof=1) / np.sqrt(n)


def fractional_residual_budget(f, rho0, spec, beta, t_grid, n_paths, rng=None, z=3.5,
                               inner="sde", **kwargs):
    """Caputo-L1 residual of the subordinated expectation with an error budget.

    The expectation is sampled on ``t_grid`` refined by two, so one set of
    paths gives the residual at step ``d`` and at ``d/2``.  The reported
    residual is the one at step ``d``; its budget at each point is
    ``z * SE`` plus a Richardson estimate of the discretization error built
    from ``|r_d - r_{d/2}|``.  ``z`` should cover the whole grid at once (3.5 is
    a Bonferroni-type level for about fifty points).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    fine = np.empty(2 * t_grid.size - 1)
    fine[::2] = t_grid
    fine[1::2] = 0.5 * (t_grid[1:] + t_grid[:-1])
    res = subordinated_expectation(f, rho0, spec, beta, fine, n_paths, rng, with_generator=True,
                                   keep_paths=True, inner=inner, **kwargs)
    b = 1.0 if beta is None else beta
    m_c, se_c = fractional_residual_paths(res.f_paths[:, ::2], res.Lf_paths[:, ::2], t_grid, b)
    m_f, _ = fractional_residual_paths(res.f_paths, res.Lf_paths, fine, b)
    # Richardson: e_d ~ (r_d - r_{d/2}) / (1 - 2^-p); p = beta is the worst
    # order of the scheme (reached near t = 0, where g behaves like t^beta).
    diff = np.abs(m_c - m_f[1::2]) / (1.0 - 2.0 ** (-b))
    # the difference can cross zero where the error does not; widen over neighbours
    pad = np.pad(diff, 1, mode="edge")
    disc = np.max(np.stack([pad[:-2], pad[1:-1], pad[2:]]), axis=0)
    budget = z * se_c + disc
    g = res.f_paths[:, ::2].mean(axis=0)
    Lg = res.Lf_paths[:, ::2].mean(axis=0)
    lhs = np.diff(g) @ caputo_matrix(t_grid.size, t_grid[1] - t_grid[0], b).T
    scale = np.max(np.abs(Lg[1:]))
    rel = float(np.max(np.abs(m_c)) / scale) if scale > 0 else float(np.max(np.abs(m_c)))
    extra = {"beta": beta, "n_paths": int(n_paths), "z": z, "inner": inner,
             "sup_residual": float(np.max(np.abs(m_c))),
             "within_budget": bool(np.all(np.abs(m_c) <= budget))}
    return ResidualReport(t_grid[1:], lhs, Lg[1:], m_c, rel, budget, extra)
