"""Plant models, ground-truth state evolution, and the certainty-equivalence input."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelInvalidError
from .numerics import as_matrix, check_pd, check_psd


@dataclass
class SubsystemModel:
    """Constants of one controlled plant and its sensing/communication link.

    q_link is the packet success probability; a list gives one probability
    per channel in multi-channel scenarios.
    """

    index: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    W: np.ndarray
    V: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    q_link: float | list[float] = 1.0
    static_id: int | None = None  # defaults to the layout's descending rule

    n: int = field(init=False)
    m: int = field(init=False)
    p: int = field(init=False)

    def __post_init__(self):
        self.A = as_matrix(self.A, f"subsystem {self.index}: A")
        self.B = as_matrix(self.B, f"subsystem {self.index}: B")
        self.C = as_matrix(self.C, f"subsystem {self.index}: C")
        self.x0_mean = np.atleast_1d(np.asarray(self.x0_mean, dtype=float))
        self.n = self.A.shape[0]
        self.m = self.B.shape[1]
        self.p = self.C.shape[0]
        self.validate()

    def validate(self):
        i = self.index
        if i < 1:
            raise ModelInvalidError(f"subsystem index must be >= 1, got {i}")
        n, m, p = self.n, self.m, self.p
        if self.A.shape != (n, n):
            raise ModelInvalidError(f"subsystem {i}: A must be square")
        if self.B.shape != (n, m):
            raise ModelInvalidError(f"subsystem {i}: B must be {n}x{m}, got {self.B.shape}")
        if self.C.shape != (p, n):
            raise ModelInvalidError(f"subsystem {i}: C must be {p}x{n}, got {self.C.shape}")
        self.Q = check_psd(as_matrix(self.Q, f"subsystem {i}: Q"), f"subsystem {i}: Q")
        self.R = check_pd(as_matrix(self.R, f"subsystem {i}: R"), f"subsystem {i}: R")
        self.W = check_psd(as_matrix(self.W, f"subsystem {i}: W"), f"subsystem {i}: W")
        self.V = check_psd(as_matrix(self.V, f"subsystem {i}: V"), f"subsystem {i}: V")
        for mat, dim, name in [
            (self.Q, n, "Q"), (self.R, m, "R"), (self.W, n, "W"), (self.V, p, "V"),
        ]:
            if mat.shape != (dim, dim):
                raise ModelInvalidError(f"subsystem {i}: {name} must be {dim}x{dim}")
        if self.x0_mean.shape != (n,):
            raise ModelInvalidError(f"subsystem {i}: x0_mean must have length {n}")
        self.x0_cov = check_psd(
            as_matrix(self.x0_cov, f"subsystem {i}: x0_cov"), f"subsystem {i}: x0_cov"
        )
        if self.x0_cov.shape != (n, n):
            raise ModelInvalidError(f"subsystem {i}: x0_cov must be {n}x{n}")
        for q in self.link_probabilities():
            if not 0.0 <= q <= 1.0:
                raise ModelInvalidError(f"subsystem {i}: q_link must lie in [0, 1], got {q}")

    def link_probabilities(self) -> list[float]:
        """Per-channel success probabilities (length 1 for a scalar q_link)."""
        if isinstance(self.q_link, (list, tuple, np.ndarray)):
            return [float(q) for q in self.q_link]
        return [float(self.q_link)]

    def link_probability(self, channel: int = 0) -> float:
        qs = self.link_probabilities()
        return qs[channel] if len(qs) > 1 else qs[0]


@dataclass
class PlantState:
    """True state of one plant at the start of slot k."""

    x: np.ndarray
    k: int = 0


def step_plant(state: PlantState, u: np.ndarray, w: np.ndarray, model: SubsystemModel) -> PlantState:
    """Advance one slot: x+ = A x + B u + w."""
    return PlantState(x=model.A @ state.x + model.B @ u + w, k=state.k + 1)


def measure(state: PlantState, v: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Sensor output y = C x + v."""
    return c @ state.x + v


def control_input(l_inf: np.ndarray, x_hat_posterior: np.ndarray) -> np.ndarray:
    """Certainty-equivalence input u = L x_hat."""
    return l_inf @ x_hat_posterior
