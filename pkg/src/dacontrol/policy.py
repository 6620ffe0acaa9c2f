"""Disturbance-action policies, their feasible set, and projections onto it.

A policy is a stack of H matrices M^[0]..M^[H-1]; the action at time t is
u_t = -K x_t + sum_i M^[i-1] w_{t-i} for a fixed certified gain K. The
feasible set is a product of per-block spectral-norm balls with geometrically
decaying radii, so the Euclidean projection is exact blockwise SVD clipping.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .lds import LinearSystem, as_matrix

WEIGHTED_PROJ_TOL = 1e-10
WEIGHTED_PROJ_MAX_SWEEPS = 500
FEASIBILITY_SLACK = 1e-9


@dataclass(frozen=True)
class DacPolicy:
    """H blocks of shape (d_u, d_x), stored as one (H, d_u, d_x) array."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.array(self.blocks, dtype=float)
        if b.ndim != 3 or b.shape[0] < 1:
            raise ValueError(f"blocks must have shape (H, d_u, d_x), got {b.shape}")
        b.flags.writeable = False
        object.__setattr__(self, "blocks", b)

    @property
    def H(self) -> int:
        return self.blocks.shape[0]

    @property
    def d_u(self) -> int:
        return self.blocks.shape[1]

    @property
    def d_x(self) -> int:
        return self.blocks.shape[2]

    @classmethod
    def zeros(cls, H: int, d_u: int, d_x: int) -> "DacPolicy":
        return cls(np.zeros((H, d_u, d_x)))

    def block_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(b, 2) for b in self.blocks])

    def to_json(self) -> str:
        return json.dumps({"blocks": self.blocks.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DacPolicy":
        return cls(np.array(json.loads(text)["blocks"], dtype=float))


def vectorize(policy: DacPolicy) -> np.ndarray:
    """Flatten blocks in ascending order, rows of each block concatenated."""
    return policy.blocks.reshape(-1).copy()


def devectorize(v: np.ndarray, H: int, d_u: int, d_x: int) -> DacPolicy:
    v = np.asarray(v, dtype=float)
    if v.shape != (H * d_u * d_x,):
        raise ValueError(f"vector has length {v.size}, expected {H * d_u * d_x}")
    return DacPolicy(v.reshape(H, d_u, d_x))


@dataclass(frozen=True)
class PolicyClass:
    """Product of spectral balls: block i must satisfy |M^[i]| <= radii[i]."""

    H: int
    d_u: int
    d_x: int
    radii: np.ndarray

    def __post_init__(self):
        r = np.array(self.radii, dtype=float)
        if r.shape != (self.H,) or np.any(r <= 0.0) or np.any(np.diff(r) >= 0.0):
            raise ValueError("radii must be positive and strictly decreasing, one per block")
        r.flags.writeable = False
        object.__setattr__(self, "radii", r)

    @classmethod
    def from_stability(
        cls, kappa: float, gamma: float, kappa_B: float, H: int, d_u: int, d_x: int
    ) -> "PolicyClass":
        radii = kappa**3 * kappa_B * (1.0 - gamma) ** (np.arange(H) + 1)
        return cls(H, d_u, d_x, radii)

    @property
    def dim(self) -> int:
        return self.H * self.d_u * self.d_x

    def contains(self, policy: DacPolicy, slack: float = FEASIBILITY_SLACK) -> bool:
        return bool(np.all(policy.block_norms() <= self.radii + slack))


class DisturbanceRing:
    """The last ``capacity`` disturbances, newest first, zero before the start."""

    def __init__(self, capacity: int, d_x: int):
        self._buf = np.zeros((capacity, d_x))

    def push(self, w: np.ndarray) -> None:
        self._buf[1:] = self._buf[:-1]
        self._buf[0] = w

    def recent(self) -> np.ndarray:
        """View of shape (capacity, d_x); row i holds w_{t-1-i}."""
        return self._buf

    def copy(self) -> "DisturbanceRing":
        out = DisturbanceRing(self._buf.shape[0], self._buf.shape[1])
        out._buf[:] = self._buf
        return out


def action(policy: DacPolicy, k_fixed: np.ndarray, x: np.ndarray, ring: DisturbanceRing) -> np.ndarray:
    """-K x plus the policy's response to the last H disturbances."""
    u = -np.asarray(k_fixed) @ np.asarray(x, dtype=float)
    u = u + np.einsum("iuz,iz->u", policy.blocks, ring.recent()[: policy.H])
    return u


# ---------------------------------------------------------------------------
# Projections


def project_spectral_ball(m: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of a matrix onto {|M|_2 <= radius}: clip singular values."""
    if min(m.shape) == 1:
        norm = np.linalg.norm(m)
        return m if norm <= radius else m * (radius / norm)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s[0] <= radius:
        return m
    return (u * np.minimum(s, radius)) @ vt


def clip_blocks(blocks: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Blockwise spectral clip; vectorized when blocks are rows or columns."""
    if min(blocks.shape[1], blocks.shape[2]) == 1:
        flat = blocks.reshape(blocks.shape[0], -1)
        norms = np.linalg.norm(flat, axis=1)
        scale = np.ones_like(norms)
        over = norms > radii
        scale[over] = radii[over] / norms[over]
        return blocks * scale[:, None, None]
    return np.stack([project_spectral_ball(blocks[i], radii[i]) for i in range(blocks.shape[0])])


def project_euclidean(policy: DacPolicy, pclass: PolicyClass) -> DacPolicy:
    """Exact Euclidean projection onto the feasible set, block by block."""
    return DacPolicy(clip_blocks(policy.blocks, pclass.radii))


def project_weighted(
    policy: DacPolicy,
    pclass: PolicyClass,
    P: np.ndarray,
    tol: float = WEIGHTED_PROJ_TOL,
    max_sweeps: int = WEIGHTED_PROJ_MAX_SWEEPS,
    p_lmax: float | None = None,
) -> DacPolicy:
    """Projection in the P-induced norm: argmin_{M' feasible} |vec(M') - vec(M)|_P.

    Solved by accelerated projected gradient on the quadratic
    (v - v0)ᵀ P (v - v0) / 2 with the exact blockwise clip as the feasibility
    step, until successive iterates differ by at most ``tol`` or ``max_sweeps``
    sweeps have run. Iterates are feasible at every sweep.
    """
    P = np.asarray(P, dtype=float)
    n = pclass.dim
    if P.shape != (n, n):
        raise ValueError(f"P must be ({n}, {n}), got {P.shape}")
    if p_lmax is None:
        eigs = np.linalg.eigvalsh(0.5 * (P + P.T))
        if eigs[0] <= 0.0:
            raise ValueError(f"P must be positive definite; smallest eigenvalue {eigs[0]:.3g}")
        p_lmax = float(eigs[-1])
    v0 = vectorize(policy)

    def clip(v: np.ndarray) -> np.ndarray:
        return clip_blocks(v.reshape(pclass.H, pclass.d_u, pclass.d_x), pclass.radii).reshape(-1)

    step_size = 1.0 / p_lmax
    x = clip(v0)
    z = x.copy()
    momentum = 1.0
    for _ in range(max_sweeps):
        grad = P @ (z - v0)
        x_next = clip(z - step_size * grad)
        momentum_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum**2))
        z = x_next + ((momentum - 1.0) / momentum_next) * (x_next - x)
        delta = float(np.max(np.abs(x_next - x)))
        x, momentum = x_next, momentum_next
        if delta <= tol:
            break
    return devectorize(x, pclass.H, pclass.d_u, pclass.d_x)


def linear_to_dac(k_fixed, k_star, sys: LinearSystem, H: int) -> DacPolicy:
    """The policy whose rollout replays u = -K* x up to a geometrically small gap.

    Blocks are (K - K*) (A - B K*)^i for i = 0..H-1.
    """
    k_fixed = as_matrix(k_fixed, "k_fixed")
    k_star = as_matrix(k_star, "k_star")
    closed = sys.A - sys.B @ k_star
    diff = k_fixed - k_star
    blocks = np.zeros((H, sys.d_u, sys.d_x))
    power = np.eye(sys.d_x)
    for i in range(H):
        blocks[i] = diff @ power
        power = power @ closed
    return DacPolicy(blocks)


# ---------------------------------------------------------------------------
# Rollout controllers


class LinearController:
    """u = -K x."""

    def __init__(self, K):
        self.K = as_matrix(K, "K")

    def act(self, s: int, x: np.ndarray) -> np.ndarray:
        return -self.K @ x


class DacController:
    """A fixed disturbance-action policy with its own disturbance history."""

    def __init__(self, policy: DacPolicy, k_fixed):
        self.policy = policy
        self.k_fixed = as_matrix(k_fixed, "k_fixed")
        self.ring = DisturbanceRing(policy.H, policy.d_x)

    def act(self, s: int, x: np.ndarray) -> np.ndarray:
        return action(self.policy, self.k_fixed, x, self.ring)

    def observe(self, w: np.ndarray) -> None:
        self.ring.push(w)
