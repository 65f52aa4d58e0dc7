"""Input validation helpers and the package's exception types.

The ``check_*`` helpers follow the scikit-learn convention: they coerce
their argument to a numpy array, raise on violation, and return the
coerced value so callers can write ``rho = check_density_matrix(rho)``.
"""

import numpy as np

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = -1e-10
OPERATOR_HERMITIAN_TOL = 1e-10


class FilteringError(Exception):
    """Base class for errors raised by fracfilter."""


class ValidationError(FilteringError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(ValidationError):
    """Matrix dimensions are inconsistent."""


class SizingError(ValidationError):
    """A lifted space would exceed the configured maximum dimension."""


class StepSizeError(FilteringError, ValueError):
    """The step is too large for the requested scheme (negative probability)."""


class NumericalError(FilteringError, ArithmeticError):
    """All outcome probabilities underflowed or a normalization vanished."""


class DegenerateStateError(NumericalError):
    """Projection onto states produced a zero-trace matrix."""


class RangeError(FilteringError, ValueError):
    """A query lies outside the range covered by a sampled path."""


def dag(x):
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(x, -1, -2))


def as_matrix(m, name="matrix"):
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be a square matrix, got shape {m.shape}")
    return m


def check_hermitian(m, name="operator", tol=OPERATOR_HERMITIAN_TOL):
    m = as_matrix(m, name)
    if np.max(np.abs(m - m.conj().T), initial=0.0) > tol:
        raise ValidationError(f"{name} is not Hermitian within {tol:g}")
    return m


def check_density_matrix(rho, name="rho"):
    """Validate a single density matrix (Hermitian, unit trace, PSD)."""
    rho = as_matrix(rho, name)
    if np.max(np.abs(rho - rho.conj().T), initial=0.0) > HERMITIAN_TOL:
        raise ValidationError(f"{name} is not Hermitian within {HERMITIAN_TOL:g}")
    tr = np.trace(rho)
    if abs(tr - 1.0) > TRACE_TOL:
        raise ValidationError(f"{name} has trace {tr.real:.3g}, expected 1")
    lo = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
    if lo < PSD_TOL:
        raise ValidationError(f"{name} has negative eigenvalue {lo:.3g}")
    return rho


def check_same_dim(n, *mats, names=None):
    names = names or [f"operator {i}" for i in range(len(mats))]
    for m, nm in zip(mats, names):
        if m is not None and np.shape(m) != (n, n):
            raise ShapeError(f"{nm} has shape {np.shape(m)}, expected {(n, n)}")


def check_positive(x, name):
    if not np.isfinite(x) or x <= 0:
        raise ValidationError(f"{name} must be positive and finite, got {x!r}")
    return float(x)


def check_random_state(seed):
    """Turn ``None``, an int, or a Generator into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
