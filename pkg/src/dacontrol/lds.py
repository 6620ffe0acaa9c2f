"""Linear dynamics, bounded noise models, strongly convex stage costs, rollouts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .rng import substream

_TRUNC_GAUSS_MC_SAMPLES = 10**6
_TRUNC_GAUSS_MC_SEED = 715517
_TRUNC_GAUSS_MOMENTS: dict = {}


def as_matrix(a, name: str) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {m.shape}")
    m.flags.writeable = False
    return m


def spectral_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(m, 2))


@dataclass(frozen=True)
class LinearSystem:
    """Discrete-time dynamics x_{t+1} = A x_t + B u_t + w_t, started at x = 0."""

    A: np.ndarray
    B: np.ndarray
    kappa_B: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "A", as_matrix(self.A, "A"))
        object.__setattr__(self, "B", as_matrix(self.B, "B"))
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != self.A.shape[0]:
            raise ValueError(f"B rows ({self.B.shape[0]}) must match state dim ({self.A.shape[0]})")
        b_norm = spectral_norm(self.B)
        if self.kappa_B <= 0.0:
            object.__setattr__(self, "kappa_B", max(b_norm, 1e-300))
        elif self.kappa_B < b_norm - 1e-12:
            raise ValueError(f"kappa_B={self.kappa_B} is below the control-map norm {b_norm}")

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]


def step(sys: LinearSystem, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """One transition A x + B u + w."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape != (sys.d_x,) or u.shape != (sys.d_u,) or w.shape != (sys.d_x,):
        raise ValueError(
            f"dimension mismatch: x{x.shape} u{u.shape} w{w.shape} for d_x={sys.d_x}, d_u={sys.d_u}"
        )
    return sys.A @ x + sys.B @ u + w


def recover_disturbance(
    sys: LinearSystem, x_t: np.ndarray, u_t: np.ndarray, x_next: np.ndarray
) -> np.ndarray:
    """Invert the transition: w_t = x_{t+1} - A x_t - B u_t."""
    return np.asarray(x_next, dtype=float) - sys.A @ np.asarray(x_t, dtype=float) - sys.B @ np.asarray(u_t, dtype=float)


# ---------------------------------------------------------------------------
# Noise models


@dataclass(frozen=True)
class NoiseModel:
    """Bounded, zero-mean, i.i.d. disturbance distribution with known covariance.

    ``Sigma`` is the exact second moment E[w wᵀ] (analytic for the sphere and
    Rademacher kinds, cached Monte-Carlo for the truncated Gaussian) and
    ``sigma_sq`` its smallest eigenvalue.
    """

    kind: str
    dim: int
    W: float
    Sigma: np.ndarray
    sigma_sq: float

    def __post_init__(self):
        if self.kind not in ("sphere_uniform", "scaled_rademacher", "truncated_gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.W <= 0.0 or self.dim < 1:
            raise ValueError("W must be positive and dim at least 1")
        object.__setattr__(self, "Sigma", as_matrix(self.Sigma, "Sigma"))

    @classmethod
    def sphere_uniform(cls, dim: int, W: float) -> "NoiseModel":
        """Uniform on the radius-W sphere; covariance (W^2/d) I exactly."""
        sigma_sq = W**2 / dim
        return cls("sphere_uniform", dim, float(W), sigma_sq * np.eye(dim), sigma_sq)

    @classmethod
    def scaled_rademacher(cls, dim: int, W: float) -> "NoiseModel":
        """Coordinates +-W/sqrt(d) equiprobably; covariance (W^2/d) I exactly."""
        sigma_sq = W**2 / dim
        return cls("scaled_rademacher", dim, float(W), sigma_sq * np.eye(dim), sigma_sq)

    @classmethod
    def truncated_gaussian(
        cls,
        dim: int,
        W: float,
        mc_seed: int = _TRUNC_GAUSS_MC_SEED,
        mc_samples: int = _TRUNC_GAUSS_MC_SAMPLES,
    ) -> "NoiseModel":
        """Standard Gaussian rejection-resampled to norm <= W.

        The covariance has no convenient closed form, so it is estimated once
        from a seeded Monte-Carlo run and cached (per parameter set) for the
        process lifetime.
        """
        key = (dim, float(W), mc_seed, mc_samples)
        sigma = _TRUNC_GAUSS_MOMENTS.get(key)
        if sigma is None:
            rng = substream(mc_seed, "truncated_gaussian_moments", dim, W)
            total = np.zeros((dim, dim))
            done = 0
            chunk = 200_000
            while done < mc_samples:
                n = min(chunk, mc_samples - done)
                w = _sample_truncated_gaussian(rng, n, dim, W)
                total += w.T @ w
                done += n
            sigma = total / mc_samples
            sigma = 0.5 * (sigma + sigma.T)
            _TRUNC_GAUSS_MOMENTS[key] = sigma
        sigma_sq = float(np.linalg.eigvalsh(sigma)[0])
        return cls("truncated_gaussian", dim, float(W), sigma, sigma_sq)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` disturbances, shape (n, dim); every norm is <= W."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if self.kind == "sphere_uniform":
            g = rng.standard_normal((n, self.dim))
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            return self.W * g / norms
        if self.kind == "scaled_rademacher":
            signs = rng.integers(0, 2, size=(n, self.dim)) * 2 - 1
            return signs * (self.W / np.sqrt(self.dim))
        return _sample_truncated_gaussian(rng, n, self.dim, self.W)


def _sample_truncated_gaussian(rng: np.random.Generator, n: int, dim: int, W: float) -> np.ndarray:
    out = rng.standard_normal((n, dim))
    while True:
        bad = np.linalg.norm(out, axis=1) > W
        k = int(bad.sum())
        if k == 0:
            return out
        out[bad] = rng.standard_normal((k, dim))


def sample_noise(model: NoiseModel, rng: np.random.Generator, n: int) -> np.ndarray:
    return model.sample(rng, n)


# ---------------------------------------------------------------------------
# Stage costs


@dataclass(frozen=True)
class QuadraticCost:
    """Stage cost (x - x̄)ᵀ Q (x - x̄) + (u - ū)ᵀ R (u - ū) with Q, R ≽ alpha I.

    ``alpha`` is the smaller of the least eigenvalues of Q and R, and
    ``grad_scale`` the factor G such that the gradient norm is at most G * D
    whenever states and actions stay in a radius-D ball around the centers.
    """

    Q: np.ndarray
    R: np.ndarray
    x_offset: Optional[np.ndarray] = None
    u_offset: Optional[np.ndarray] = None
    spherical_scale: Optional[float] = None
    alpha: float = field(init=False)
    grad_scale: float = field(init=False)

    def __post_init__(self):
        q = as_matrix(self.Q, "Q")
        r = as_matrix(self.R, "R")
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "R", r)
        for name in ("x_offset", "u_offset"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float).reshape(-1)
                v.flags.writeable = False
                object.__setattr__(self, name, v)
        if q.shape[0] != q.shape[1] or r.shape[0] != r.shape[1]:
            raise ValueError("Q and R must be square")
        if self.x_offset is not None and self.x_offset.shape != (q.shape[0],):
            raise ValueError("x_offset length must match Q")
        if self.u_offset is not None and self.u_offset.shape != (r.shape[0],):
            raise ValueError("u_offset length must match R")
        q_eigs = np.linalg.eigvalsh(0.5 * (q + q.T))
        r_eigs = np.linalg.eigvalsh(0.5 * (r + r.T))
        alpha = float(min(q_eigs[0], r_eigs[0]))
        if alpha <= 0.0:
            raise ValueError(f"cost must be strongly convex; smallest curvature is {alpha}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "grad_scale", 2.0 * float(max(q_eigs[-1], r_eigs[-1])))

    @classmethod
    def spherical(cls, r: float, d_x: int, d_u: int) -> "QuadraticCost":
        """r * (|x|^2 + |u|^2) with r > 0."""
        return cls(r * np.eye(d_x), r * np.eye(d_u), spherical_scale=float(r))

    @property
    def kind(self) -> str:
        if self.spherical_scale is not None:
            return "spherical"
        if self.x_offset is not None or self.u_offset is not None:
            return "offset_quadratic"
        return "general_quadratic"

    def _centered(self, x: np.ndarray, u: np.ndarray):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.x_offset is not None:
            x = x - self.x_offset
        if self.u_offset is not None:
            u = u - self.u_offset
        return x, u

    def value(self, x: np.ndarray, u: np.ndarray):
        """Cost at (x, u); accepts a single pair or batches in the first axis."""
        x, u = self._centered(x, u)
        vx = np.einsum("...i,ij,...j->...", x, self.Q, x)
        vu = np.einsum("...i,ij,...j->...", u, self.R, u)
        out = vx + vu
        return float(out) if out.ndim == 0 else out

    def grad(self, x: np.ndarray, u: np.ndarray):
        """Gradient pair (d/dx, d/du) at a single (x, u)."""
        x, u = self._centered(x, u)
        return 2.0 * (self.Q @ x), 2.0 * (self.R @ u)


CostSeq = Union[Sequence[QuadraticCost], Callable[[int], QuadraticCost]]


def cost_at(costs: CostSeq, s: int) -> QuadraticCost:
    """Stage cost at 1-based time s."""
    if callable(costs):
        return costs(s)
    return costs[s - 1]


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class Trajectory:
    """A realized run: states x_1..x_{T+1}, actions/disturbances/costs for t = 1..T."""

    states: np.ndarray
    actions: np.ndarray
    disturbances: np.ndarray
    per_step_costs: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("states must hold one more entry than actions")
        if np.any(states[0] != 0.0):
            raise ValueError("runs must start from the zero state")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def total_cost(self) -> float:
        return float(self.per_step_costs.sum())

    def replay_error(self, sys: LinearSystem) -> float:
        """Max abs deviation when the stored states are re-stepped through the dynamics."""
        err = 0.0
        for t in range(self.horizon):
            x_next = step(sys, self.states[t], self.actions[t], self.disturbances[t])
            err = max(err, float(np.max(np.abs(x_next - self.states[t + 1]))))
        return err


def rollout(sys: LinearSystem, controller, noise_seq: np.ndarray, costs: CostSeq) -> Trajectory:
    """Run ``controller`` for T = len(noise_seq) steps from the zero state.

    The controller exposes ``act(s, x) -> u`` (1-based step index) and is told
    each realized disturbance via ``observe(w)`` after the transition, which is
    how disturbance-feedback policies maintain their history.
    """
    noise_seq = np.asarray(noise_seq, dtype=float)
    T = noise_seq.shape[0]
    if noise_seq.shape != (T, sys.d_x):
        raise ValueError(f"noise sequence must have shape (T, {sys.d_x})")
    if not callable(costs) and len(costs) < T:
        raise ValueError(f"cost sequence has {len(costs)} entries for a {T}-step run")
    states = np.zeros((T + 1, sys.d_x))
    actions = np.zeros((T, sys.d_u))
    step_costs = np.zeros(T)
    observe = getattr(controller, "observe", None)
    for t in range(T):
        u = np.asarray(controller.act(t + 1, states[t]), dtype=float).reshape(-1)
        if u.shape != (sys.d_u,):
            raise ValueError(f"controller returned action of shape {u.shape}, expected ({sys.d_u},)")
        actions[t] = u
        states[t + 1] = step(sys, states[t], u, noise_seq[t])
        step_costs[t] = cost_at(costs, t + 1).value(states[t], u)
        if observe is not None:
            observe(noise_seq[t])
    return Trajectory(states, actions, noise_seq.copy(), step_costs)
