"""Structured continuous-time latent operator and its propagators.

Time is measured in snapshot intervals: ``tau = 1`` advances one dataset step.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .latent_space import LatentState

__all__ = [
    "KoopmanOperator",
    "OperatorSpectrum",
    "Propagator",
    "assemble",
    "matrix_exp",
    "propagate",
    "rk4_propagate",
    "rk4_step",
    "spectrum",
    "stabilize",
]


def assemble(W, D) -> np.ndarray:
    """``K = (W - W^T)/2 + (D + D^T)/2``."""
    W = np.asarray(W, dtype=float)
    D = np.asarray(D, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape != D.shape:
        raise ValueError(f"W and D must be equal square matrices, got {W.shape} and {D.shape}")
    return 0.5 * (W - W.T) + 0.5 * (D + D.T)


@dataclass
class KoopmanOperator:
    W: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.W = np.array(self.W, dtype=float)
        self.D = np.array(self.D, dtype=float)
        assemble(self.W, self.D)

    @classmethod
    def from_matrix(cls, K) -> "KoopmanOperator":
        K = np.asarray(K, dtype=float)
        return cls(K.copy(), K.copy())

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def skew(self) -> np.ndarray:
        return 0.5 * (self.W - self.W.T)

    @property
    def sym(self) -> np.ndarray:
        return 0.5 * (self.D + self.D.T)

    @property
    def K(self) -> np.ndarray:
        return assemble(self.W, self.D)


def rk4_step(K, z, h: float) -> np.ndarray:
    """One classical RK4 step of ``dz/dt = K z``; ``z`` may be ``(d,)`` or ``(d, B)``."""
    k1 = K @ z
    k2 = K @ (z + 0.5 * h * k1)
    k3 = K @ (z + 0.5 * h * k2)
    k4 = K @ (z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_propagate(K, z, h: float, n_steps: int) -> np.ndarray:
    for _ in range(n_steps):
        z = rk4_step(K, z, h)
    return z


# Pade coefficients and 1-norm thresholds of Higham (2005), degrees 3..13.
_PADE = {
    3: (1.495585217958292e-2, (120.0, 60.0, 12.0, 1.0)),
    5: (2.539398330063230e-1, (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0)),
    7: (9.504178996162932e-1,
        (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0)),
    9: (2.097847961257068e0,
        (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
         2162160.0, 110880.0, 3960.0, 90.0, 1.0)),
}
_THETA13 = 5.371920351148152
_B13 = (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
        1187353796428800.0, 129060195264000.0, 10559470521600.0, 670442572800.0,
        33522128640.0, 1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0)


def _pade_low(A, m, b):
    n = A.shape[0]
    ident = np.eye(n)
    A2 = A @ A
    powers = [ident, A2]
    for _ in range(2, m // 2 + 1):
        powers.append(powers[-1] @ A2)
    U = A @ sum(b[2 * j + 1] * powers[j] for j in range(m // 2 + 1))
    V = sum(b[2 * j] * powers[j] for j in range(m // 2 + 1))
    return U, V


def _pade13(A):
    b = _B13
    ident = np.eye(A.shape[0])
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A2 @ A4
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    return U, V


def matrix_exp(K, tau: float = 1.0) -> np.ndarray:
    """``exp(K tau)`` by scaling and squaring with a degree 3-13 Pade approximant."""
    A = np.asarray(K, dtype=float) * float(tau)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix_exp needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix_exp input has non-finite entries")
    norm = np.linalg.norm(A, 1)
    for m, (theta, b) in _PADE.items():
        if norm <= theta:
            U, V = _pade_low(A, m, b)
            return la.solve(V - U, V + U)
    s = max(0, int(np.ceil(np.log2(norm / _THETA13)))) if norm > 0 else 0
    U, V = _pade13(A / 2.0**s)
    E = la.solve(V - U, V + U)
    for _ in range(s):
        E = E @ E
    return E


class Propagator:
    """Caches ``exp(K tau)`` for repeated queries at the same ``tau``."""

    def __init__(self, K):
        self.K = np.asarray(K, dtype=float)
        self._cache: dict[float, np.ndarray] = {}

    def matrix(self, tau: float) -> np.ndarray:
        tau = float(tau)
        E = self._cache.get(tau)
        if E is None:
            E = self._cache[tau] = matrix_exp(self.K, tau)
        return E

    def __call__(self, state: LatentState, tau: float) -> LatentState:
        if tau == 0:
            return LatentState(state.z.copy(), state.t)
        return LatentState(self.matrix(tau) @ state.z, state.t + tau)


def propagate(K, state, tau: float) -> LatentState:
    """``z(t + tau) = exp(K tau) z(t)``; pass a :class:`Propagator` to reuse its cache."""
    prop = K if isinstance(K, Propagator) else Propagator(K)
    if not isinstance(state, LatentState):
        state = LatentState(state)
    return prop(state, tau)


@dataclass
class OperatorSpectrum:
    eigenvalues: np.ndarray  # sorted by real part, then imaginary part
    spectral_abscissa: float = field(init=False)

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=complex)
        self.eigenvalues = ev[np.lexsort((ev.imag, ev.real))]
        self.spectral_abscissa = float(ev.real.max()) if ev.size else float("-inf")

    def pairs(self) -> np.ndarray:
        """``(re, im)`` rows for plotting."""
        return np.column_stack([self.eigenvalues.real, self.eigenvalues.imag])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["re", "im"])
        for re, im in self.pairs():
            w.writerow([repr(float(re)), repr(float(im))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "OperatorSpectrum":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["re", "im"]:
            raise ValueError("expected a spectrum CSV with columns re, im")
        return cls(np.array([float(r) + 1j * float(i) for r, i in rows[1:]]))


def spectrum(K) -> OperatorSpectrum:
    """All eigenvalues of ``K``; LAPACK non-convergence propagates as ``LinAlgError``."""
    K = np.asarray(K, dtype=float)
    if not np.all(np.isfinite(K)):
        raise ValueError("spectrum of a non-finite operator")
    return OperatorSpectrum(np.linalg.eigvals(K))


def stabilize(K, margin: float = 0.0) -> np.ndarray:
    """Shift ``K`` by a multiple of the identity so its spectral abscissa is at most ``-margin``."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    K = np.asarray(K, dtype=float)
    a = spectrum(K).spectral_abscissa
    if a > -margin:
        return K - (a + margin) * np.eye(K.shape[0])
    return K.copy()
