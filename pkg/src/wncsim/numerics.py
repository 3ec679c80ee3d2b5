"""Dense small-matrix utilities and the offline control/estimation solvers.

Everything here is a pure function over numpy arrays.  Covariance maps
re-symmetrize their results so that long fixed-point iterations cannot
drift out of the symmetric cone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelInvalidError, NumericError, SolverFailureError

# Iteration / tolerance constants for the fixed-point solvers.
MAX_ITERATIONS = 100_000
STEP_TOL = 1e-12
DARE_RESIDUAL_TOL = 1e-9
STEADY_COV_RESIDUAL_TOL = 1e-10
CONDITION_LIMIT = 1e12
PSD_TOL = 1e-9


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float array with finite entries."""
    a = np.asarray(x, dtype=float)
    if a.ndim != 2:
        raise ModelInvalidError(f"{name}: expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelInvalidError(f"{name}: entries must be finite")
    return a


def symmetrize(x: np.ndarray) -> np.ndarray:
    return (x + x.T) / 2.0


def is_symmetric(x: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(np.all(np.abs(x - x.T) <= tol * max(1.0, float(np.abs(x).max(initial=0.0)))))


def check_psd(x: np.ndarray, name: str = "matrix", tol: float = PSD_TOL) -> np.ndarray:
    """Validate symmetry and positive semi-definiteness; returns the symmetrized input."""
    a = as_matrix(x, name)
    if a.shape[0] != a.shape[1]:
        raise ModelInvalidError(f"{name}: must be square, got shape {a.shape}")
    if not is_symmetric(a, tol):
        raise ModelInvalidError(f"{name}: must be symmetric")
    a = symmetrize(a)
    w = np.linalg.eigvalsh(a)
    scale = max(1.0, float(w[-1])) if w.size else 1.0
    if w.size and w[0] < -tol * scale:
        raise ModelInvalidError(f"{name}: not positive semi-definite (min eigenvalue {w[0]:.3e})")
    return a


def check_pd(x: np.ndarray, name: str = "matrix", tol: float = 1e-12) -> np.ndarray:
    a = check_psd(x, name)
    w = np.linalg.eigvalsh(a)
    if w[0] <= tol * max(1.0, float(w[-1])):
        raise ModelInvalidError(f"{name}: must be positive definite (min eigenvalue {w[0]:.3e})")
    return a


def solve_linear(s: np.ndarray, b: np.ndarray, name: str = "linear system") -> np.ndarray:
    """Solve s @ x = b with a pivoted factorization and a condition-number guard."""
    s = np.asarray(s, dtype=float)
    cond = np.linalg.cond(s)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise NumericError(f"{name}: matrix is singular or badly conditioned (cond={cond:.3e})")
    return np.linalg.solve(s, b)


def is_controllable(a: np.ndarray, b: np.ndarray, tol: float | None = None) -> bool:
    """Kalman rank test on [b, a b, ..., a^(n-1) b]."""
    n = a.shape[0]
    blocks = [b]
    for _ in range(n - 1):
        blocks.append(a @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks), tol=tol)) == n


def is_observable(a: np.ndarray, c: np.ndarray, tol: float | None = None) -> bool:
    return is_controllable(a.T, c.T, tol=tol)


def sqrtm_psd(x: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition."""
    w, v = np.linalg.eigh(symmetrize(x))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def spectral_radius(a: np.ndarray) -> float:
    """Largest eigenvalue magnitude of a square matrix."""
    a = as_matrix(a, "spectral_radius input")
    if a.shape[0] != a.shape[1]:
        raise ModelInvalidError("spectral_radius: matrix must be square")
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def riccati_predict(x, a, w) -> np.ndarray:
    """Covariance time update: a x a^T + w."""
    x, a, w = (np.asarray(z, dtype=float) for z in (x, a, w))
    return symmetrize(a @ x @ a.T + w)


def riccati_correct(x, c, v) -> np.ndarray:
    """Covariance measurement update: x - x c^T (c x c^T + v)^-1 c x."""
    x, c, v = (np.asarray(z, dtype=float) for z in (x, c, v))
    cx = c @ x
    s = c @ x @ c.T + v
    return symmetrize(x - cx.T @ solve_linear(s, cx, "innovation covariance"))


def kalman_gain(x_prior, c, v) -> np.ndarray:
    """Gain x c^T (c x c^T + v)^-1 for a prior covariance x."""
    x_prior, c, v = (np.asarray(z, dtype=float) for z in (x_prior, c, v))
    cx = c @ x_prior
    s = c @ x_prior @ c.T + v
    return solve_linear(s, cx, "innovation covariance").T


def solve_dare(a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Infinite-horizon regulator Riccati solution by fixed-point iteration from q.

    Requires (a, b) controllable and (a, q^(1/2)) observable, checked by
    numerical rank tests.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    q = check_psd(q, "Q")
    r = check_pd(r, "R")
    if not is_controllable(a, b):
        raise ModelInvalidError("solve_dare: (A, B) fails the controllability rank test")
    if not is_observable(a, sqrtm_psd(q)):
        raise ModelInvalidError("solve_dare: (A, Q^1/2) fails the observability rank test")

    pi = q.copy()
    for _ in range(MAX_ITERATIONS):
        apb = a.T @ pi @ b
        gain_term = apb @ solve_linear(b.T @ pi @ b + r, apb.T, "DARE inner matrix")
        pi_next = symmetrize(a.T @ pi @ a + q - gain_term)
        step = float(np.linalg.norm(pi_next - pi))
        pi = pi_next
        if step < STEP_TOL:
            break
    else:
        residual = _dare_residual(pi, a, b, q, r)
        raise SolverFailureError(
            f"solve_dare: no convergence after {MAX_ITERATIONS} iterations "
            f"(residual {residual:.3e})",
            residual=residual,
        )
    residual = _dare_residual(pi, a, b, q, r)
    if residual >= DARE_RESIDUAL_TOL:
        raise SolverFailureError(
            f"solve_dare: converged iterate misses the residual target ({residual:.3e})",
            residual=residual,
        )
    return pi


def _dare_residual(pi, a, b, q, r) -> float:
    l = feedback_gain(a, b, r, pi)
    rhs = a.T @ pi @ a + q - l.T @ (b.T @ pi @ b + r) @ l
    return float(np.linalg.norm(pi - rhs))


def feedback_gain(a, b, r, pi) -> np.ndarray:
    """Steady-state feedback gain -(b^T pi b + r)^-1 b^T pi a."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    r, pi = np.asarray(r, dtype=float), np.asarray(pi, dtype=float)
    return -solve_linear(b.T @ pi @ b + r, b.T @ pi @ a, "feedback gain inner matrix")


def control_weight(b, r, l, pi) -> np.ndarray:
    """Weight l^T (b^T pi b + r) l applied to the estimation error in the step cost."""
    b, r = np.asarray(b, dtype=float), np.asarray(r, dtype=float)
    l, pi = np.asarray(l, dtype=float), np.asarray(pi, dtype=float)
    return symmetrize(l.T @ (b.T @ pi @ b + r) @ l)


def steady_state_covariance(
    a: np.ndarray, c: np.ndarray, w: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point of the predict-correct covariance map and its steady gain.

    Returns (p_bar, k_steady) with p_bar solving correct(predict(X)) = X and
    k_steady the corresponding innovation gain.
    """
    a = as_matrix(a, "A")
    c = as_matrix(c, "C")
    w = check_psd(w, "W")
    v = check_psd(v, "V")
    if not is_observable(a, c):
        raise ModelInvalidError("steady_state_covariance: (A, C) fails the observability rank test")
    if not is_controllable(a, sqrtm_psd(w)):
        raise ModelInvalidError(
            "steady_state_covariance: (A, W^1/2) fails the controllability rank test"
        )

    p = w.copy()
    for _ in range(MAX_ITERATIONS):
        p_next = riccati_correct(riccati_predict(p, a, w), c, v)
        step = float(np.linalg.norm(p_next - p))
        p = p_next
        if step < STEP_TOL:
            break
    else:
        residual = float(np.linalg.norm(riccati_correct(riccati_predict(p, a, w), c, v) - p))
        raise SolverFailureError(
            f"steady_state_covariance: no convergence after {MAX_ITERATIONS} iterations "
            f"(residual {residual:.3e})",
            residual=residual,
        )
    residual = float(np.linalg.norm(riccati_correct(riccati_predict(p, a, w), c, v) - p))
    if residual >= STEADY_COV_RESIDUAL_TOL:
        raise SolverFailureError(
            f"steady_state_covariance: converged iterate misses the residual target "
            f"({residual:.3e})",
            residual=residual,
        )
    k_steady = kalman_gain(riccati_predict(p, a, w), c, v)
    return p, k_steady


def psd_factor(cov: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Factor F with F F^T = cov, valid for singular PSD inputs."""
    cov = as_matrix(cov, name)
    if cov.shape[0] != cov.shape[1] or not is_symmetric(cov):
        raise ModelInvalidError(f"{name}: must be square symmetric")
    w, v = np.linalg.eigh(symmetrize(cov))
    scale = max(1.0, float(w[-1])) if w.size else 1.0
    if w.size and w[0] < -PSD_TOL * scale:
        raise ModelInvalidError(f"{name}: not positive semi-definite (min eigenvalue {w[0]:.3e})")
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_gaussian(mean, cov, rng: np.random.Generator) -> np.ndarray:
    """Draw one sample from N(mean, cov); exact for singular cov, deterministic per rng state."""
    mean = np.asarray(mean, dtype=float)
    factor = psd_factor(cov)
    return mean + factor @ rng.standard_normal(mean.shape[0])


@dataclass(frozen=True)
class OfflineGains:
    """Per-subsystem constants computed once before any simulation starts."""

    pi_inf: np.ndarray     # regulator Riccati solution
    l_inf: np.ndarray      # feedback gain
    gamma_inf: np.ndarray  # error-weight in the per-step cost
    p_bar: np.ndarray      # steady filter posterior covariance
    k_steady: np.ndarray   # steady filter gain
    a_closed: np.ndarray   # a + b l_inf

    def validate(self, a, b, c, q, r, w, v):
        """Re-check the defining fixed-point residuals; raises on violation."""
        check_psd(self.pi_inf, "pi_inf")
        check_psd(self.gamma_inf, "gamma_inf")
        check_psd(self.p_bar, "p_bar")
        res = float(
            np.linalg.norm(riccati_correct(riccati_predict(self.p_bar, a, w), c, v) - self.p_bar)
        )
        if res >= STEADY_COV_RESIDUAL_TOL:
            raise SolverFailureError(f"p_bar fixed-point residual too large ({res:.3e})", res)


def compute_offline_gains(a, b, c, q, r, w, v) -> OfflineGains:
    """Solve both offline fixed points for one subsystem."""
    pi = solve_dare(a, b, q, r)
    l = feedback_gain(a, b, r, pi)
    gamma = control_weight(b, r, l, pi)
    p_bar, k_steady = steady_state_covariance(a, c, w, v)
    return OfflineGains(
        pi_inf=pi,
        l_inf=l,
        gamma_inf=gamma,
        p_bar=p_bar,
        k_steady=k_steady,
        a_closed=a + b @ l,
    )
