"""Diagonal strong-stability certificates and a Riccati-based default gain.

A gain K is (kappa, gamma)-diagonally strongly stable for (A, B) when
A - B K = Q L Q^{-1} with L complex diagonal, max |L_ii| <= 1 - gamma, and
|K|, |Q|, |Q^{-1}| all at most kappa. Certification is numerical: eigensolve,
deterministic eigenvector normalization, and a reconstruction residual check.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .lds import LinearSystem, as_matrix, spectral_norm

DEFECTIVE_COND_LIMIT = 1e12
RECONSTRUCTION_RTOL = 1e-8
RICCATI_RTOL = 1e-12
RICCATI_MAX_ITER = 10**5


class StabilityError(Exception):
    """Certification failure; ``reason`` is one of defective / unstable / unstabilizable / bounds."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class StabilityCertificate:
    """Witness of diagonal strong stability for a specific closed loop."""

    K: np.ndarray
    Q: np.ndarray
    L: np.ndarray
    kappa: float
    gamma: float

    def a_tilde(self) -> np.ndarray:
        """The certified closed loop Q L Q^{-1}, returned as a real matrix."""
        m = self.Q @ self.L @ np.linalg.inv(self.Q)
        return np.real(m)

    def to_json(self) -> str:
        def cplx(m: np.ndarray):
            return [[[float(np.real(v)), float(np.imag(v))] for v in row] for row in m]

        payload = {
            "K": [[float(v) for v in row] for row in self.K],
            "Q": cplx(self.Q),
            "L_diag": [[float(np.real(v)), float(np.imag(v))] for v in np.diag(self.L)],
            "kappa": self.kappa,
            "gamma": self.gamma,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StabilityCertificate":
        payload = json.loads(text)

        def uncplx(rows):
            return np.array([[complex(re, im) for re, im in row] for row in rows])

        l_diag = np.array([complex(re, im) for re, im in payload["L_diag"]])
        return cls(
            K=np.array(payload["K"], dtype=float),
            Q=uncplx(payload["Q"]),
            L=np.diag(l_diag),
            kappa=float(payload["kappa"]),
            gamma=float(payload["gamma"]),
        )


def closed_loop(sys: LinearSystem, K) -> np.ndarray:
    """A - B K."""
    K = as_matrix(K, "K")
    if K.shape != (sys.d_u, sys.d_x):
        raise ValueError(f"K must have shape ({sys.d_u}, {sys.d_x}), got {K.shape}")
    return sys.A - sys.B @ K


def _normalized_eigvectors(vecs: np.ndarray) -> np.ndarray:
    """Unit columns with the first non-negligible entry rotated to the positive real axis."""
    out = vecs.astype(complex).copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        col = col / np.linalg.norm(col)
        idx = int(np.argmax(np.abs(col) > 1e-12))
        phase = col[idx] / abs(col[idx])
        out[:, j] = col / phase
    return out


def certify(
    sys: LinearSystem, K, requested: Optional[Tuple[float, float]] = None
) -> StabilityCertificate:
    """Certify K, or raise StabilityError.

    On success, kappa = max(1, |K|, |Q|, |Q^-1|) and gamma = 1 - max |L_ii|,
    with Q built from unit-norm eigenvectors so certificates are reproducible.
    ``requested=(kappa, gamma)`` additionally fails the call when the measured
    constants do not meet those targets.
    """
    K = as_matrix(K, "K")
    a_bar = closed_loop(sys, K)
    eigvals, eigvecs = np.linalg.eig(a_bar)
    rho = float(np.max(np.abs(eigvals)))
    if rho >= 1.0:
        raise StabilityError("unstable", f"closed-loop spectral radius {rho:.6g} >= 1")
    cond = float(np.linalg.cond(eigvecs))
    if not np.isfinite(cond) or cond > DEFECTIVE_COND_LIMIT:
        raise StabilityError(
            "defective", f"eigenvector matrix condition number {cond:.3g} exceeds {DEFECTIVE_COND_LIMIT:.0e}"
        )
    q = _normalized_eigvectors(eigvecs)
    q_inv = np.linalg.inv(q)
    l_mat = np.diag(eigvals.astype(complex))
    residual = np.linalg.norm(q @ l_mat @ q_inv - a_bar)
    scale = max(np.linalg.norm(a_bar), 1e-300)
    if residual > RECONSTRUCTION_RTOL * scale:
        raise StabilityError(
            "defective", f"diagonalization residual {residual:.3g} exceeds {RECONSTRUCTION_RTOL:g} * |A - BK|"
        )
    kappa = max(1.0, spectral_norm(K), spectral_norm(q), spectral_norm(q_inv))
    # rho = 0 (dead-beat loops) would give gamma = 1; keep gamma inside (0, 1)
    gamma = 1.0 - max(rho, 1e-12)
    if requested is not None:
        kappa_req, gamma_req = requested
        if kappa > kappa_req + 1e-12 or gamma < gamma_req - 1e-12:
            raise StabilityError(
                "bounds",
                f"measured (kappa, gamma) = ({kappa:.6g}, {gamma:.6g}) misses requested ({kappa_req}, {gamma_req})",
            )
    return StabilityCertificate(K=K, Q=q, L=l_mat, kappa=float(kappa), gamma=float(gamma))


def try_certify(
    sys: LinearSystem, K, requested: Optional[Tuple[float, float]] = None
) -> Optional[StabilityCertificate]:
    try:
        return certify(sys, K, requested)
    except StabilityError:
        return None


def default_gain(sys: LinearSystem) -> np.ndarray:
    """Infinite-horizon unit-weight LQR gain from a fixed-point Riccati iteration.

    Iterates P <- AᵀPA - AᵀPB (BᵀPB + I)^{-1} BᵀPA + I until the relative change
    drops below 1e-12, then certifies the resulting gain. Divergence or
    certification failure raises StabilityError("unstabilizable").
    """
    a, b = sys.A, sys.B
    p = np.eye(sys.d_x)
    for _ in range(RICCATI_MAX_ITER):
        btp = b.T @ p
        gain_core = np.linalg.solve(btp @ b + np.eye(sys.d_u), btp @ a)
        p_next = a.T @ p @ a - a.T @ p @ b @ gain_core + np.eye(sys.d_x)
        change = np.linalg.norm(p_next - p) / max(np.linalg.norm(p), 1.0)
        p = p_next
        if not np.isfinite(p).all() or np.linalg.norm(p) > 1e100:
            raise StabilityError("unstabilizable", "Riccati iteration diverged")
        if change <= RICCATI_RTOL:
            k = np.linalg.solve(b.T @ p @ b + np.eye(sys.d_u), b.T @ p @ a)
            try:
                certify(sys, k)
            except StabilityError as exc:
                raise StabilityError("unstabilizable", f"Riccati gain failed certification: {exc}") from exc
            return k
    raise StabilityError("unstabilizable", f"no Riccati fixed point within {RICCATI_MAX_ITER} iterations")
