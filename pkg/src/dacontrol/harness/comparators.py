"""Comparator policies: best stabilizing linear gain and the offline-best DAC.

Both are evaluated on the same disturbance realizations as the learner
(common random numbers), so regret differences are noise-paired.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from ..lds import CostSeq, LinearSystem, cost_at
from ..policy import DacPolicy, PolicyClass, clip_blocks, vectorize
from ..stability import default_gain, try_certify
from ..surrogate import SurrogateModel

COMPARATOR_GAMMA_FLOOR = 0.02
OFFLINE_DAC_TOL = 1e-8
OFFLINE_DAC_MAX_ITER = 10**5


class ComparatorError(Exception):
    pass


def linear_cost_series(
    sys: LinearSystem, gains: np.ndarray, noise: np.ndarray, costs: CostSeq
) -> np.ndarray:
    """Per-step costs of u = -K x for a batch of gains on a batch of replicas.

    ``gains`` has shape (n, d_u, d_x) and ``noise`` (R, T, d_x); the result is
    (n, R, T). All candidates see identical disturbances.
    """
    gains = np.asarray(gains, dtype=float)
    noise = np.asarray(noise, dtype=float)
    n, R, T = gains.shape[0], noise.shape[0], noise.shape[1]
    x = np.zeros((n, R, sys.d_x))
    out = np.zeros((n, R, T))
    a_t, b_t = sys.A.T, sys.B.T
    for t in range(T):
        u = -np.einsum("nux,nrx->nru", gains, x)
        out[:, :, t] = cost_at(costs, t + 1).value(x, u)
        x = x @ a_t + u @ b_t + noise[None, :, t, :]
    return out


def dac_cost_series(
    sys: LinearSystem,
    policy: DacPolicy,
    k_fixed: np.ndarray,
    noise: np.ndarray,
    costs: CostSeq,
) -> np.ndarray:
    """Per-step costs of a fixed disturbance-action policy, batched over replicas.

    The policy's disturbance response is a convolution of the noise with the
    blocks, so it is precomputed for all steps at once; only the state
    recursion stays sequential.
    """
    noise = np.asarray(noise, dtype=float)
    R, T = noise.shape[0], noise.shape[1]
    H = policy.H
    response = np.zeros((R, T, sys.d_u))
    for i in range(min(H, T)):
        response[:, i + 1 :, :] += noise[:, : T - 1 - i, :] @ policy.blocks[i].T
    x = np.zeros((R, sys.d_x))
    out = np.zeros((R, T))
    a_t, b_t, k_t = sys.A.T, sys.B.T, np.asarray(k_fixed, dtype=float).T
    for t in range(T):
        u = -x @ k_t + response[:, t, :]
        out[:, t] = cost_at(costs, t + 1).value(x, u)
        x = x @ a_t + u @ b_t + noise[:, t, :]
    return out


def _certified_gain_grid(
    sys: LinearSystem,
    center: np.ndarray,
    points_per_axis: int,
    half_width: float,
    gamma_floor: float,
) -> np.ndarray:
    axes = [
        np.linspace(c - half_width, c + half_width, points_per_axis)
        for c in center.reshape(-1)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = np.stack([m.reshape(-1) for m in mesh], axis=1)
    keep = []
    for row in flat:
        k = row.reshape(sys.d_u, sys.d_x)
        cert = try_certify(sys, k)
        if cert is not None and cert.gamma >= gamma_floor:
            keep.append(k)
    if not keep:
        raise ComparatorError("no gain in the search box certifies as stable")
    return np.stack(keep)


def best_linear_comparator(
    sys: LinearSystem,
    noise: np.ndarray,
    costs: CostSeq,
    points_per_axis: int = 201,
    half_width: float = 2.0,
    gamma_floor: float = COMPARATOR_GAMMA_FLOOR,
    descent_sweeps: int = 20,
    center: Optional[np.ndarray] = None,
    method: Optional[str] = None,
) -> Tuple[np.ndarray, float, dict]:
    """Best certified linear gain on the given noise realizations.

    Up to two gain entries: dense grid over a box around the Riccati gain,
    filtered to certified gains. More entries: Riccati gain for the
    time-averaged quadratic cost refined by coordinate descent. ``method``
    ("grid" or "descent") overrides that dispatch. Returns the gain, its mean
    total cost, and diagnostics. Cost ties break toward the smallest gain norm.
    """
    T = noise.shape[1]
    if center is None:
        center = default_gain(sys)
    if method is None:
        method = "grid" if sys.d_u * sys.d_x <= 2 else "descent"
    if method == "grid":
        grid = _certified_gain_grid(sys, center, points_per_axis, half_width, gamma_floor)
        totals = linear_cost_series(sys, grid, noise, costs).sum(axis=2).mean(axis=1)
        best = float(totals.min())
        tied = np.flatnonzero(totals <= best + 1e-12 * (1.0 + abs(best)))
        norms = np.array([np.linalg.norm(grid[i]) for i in tied])
        pick = int(tied[int(np.argmin(norms))])
        return grid[pick], float(totals[pick]), {"method": "grid", "candidates": len(grid)}

    q_bar = np.mean([cost_at(costs, s).Q for s in range(1, T + 1)], axis=0)
    r_bar = np.mean([cost_at(costs, s).R for s in range(1, T + 1)], axis=0)
    k = _riccati_gain(sys, q_bar, r_bar)
    if try_certify(sys, k) is None:
        raise ComparatorError("averaged-cost Riccati gain failed certification")

    def mean_total(gain: np.ndarray) -> float:
        return float(linear_cost_series(sys, gain[None], noise, costs).sum(axis=2).mean())

    best_cost = mean_total(k)
    step = 0.25
    for _ in range(descent_sweeps):
        improved = False
        for idx in np.ndindex(k.shape):
            for sign in (1.0, -1.0):
                trial = k.copy()
                trial[idx] += sign * step
                cert = try_certify(sys, trial)
                if cert is None or cert.gamma < gamma_floor:
                    continue
                c = mean_total(trial)
                if c < best_cost - 1e-12:
                    k, best_cost, improved = trial, c, True
        if not improved:
            step *= 0.5
    return k, best_cost, {"method": "riccati+descent", "final_step": step}


def _riccati_gain(sys: LinearSystem, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    p = Q.copy()
    for _ in range(10**5):
        btp = sys.B.T @ p
        core = np.linalg.solve(btp @ sys.B + R, btp @ sys.A)
        p_next = sys.A.T @ p @ sys.A - sys.A.T @ p @ sys.B @ core + Q
        delta = np.linalg.norm(p_next - p) / max(np.linalg.norm(p), 1.0)
        p = p_next
        if delta <= 1e-12:
            break
    return np.linalg.solve(sys.B.T @ p @ sys.B + R, sys.B.T @ p @ sys.A)


def offline_best_dac(
    model: SurrogateModel,
    costs: CostSeq,
    T: int,
    pclass: PolicyClass,
    start: Optional[DacPolicy] = None,
) -> Tuple[DacPolicy, float, dict]:
    """Minimize the summed surrogate losses over the policy class.

    The objective is one exact quadratic (sum of the per-step forms), so this
    is an accelerated projected gradient solve run to gradient-mapping norm
    1e-8. The Gram part is positive definite, making the minimizer unique.
    """
    n = pclass.dim
    a_tot = np.zeros((n, n))
    b_tot = np.zeros(n)
    c_tot = 0.0
    for s in range(1, T + 1):
        a_f, b_f, c_f = model.quadratic_form(cost_at(costs, s))
        a_tot += a_f
        b_tot += b_f
        c_tot += c_f
    lip = 2.0 * float(np.linalg.eigvalsh(a_tot)[-1])
    eta = 1.0 / lip

    def clip(v: np.ndarray) -> np.ndarray:
        return clip_blocks(v.reshape(pclass.H, pclass.d_u, pclass.d_x), pclass.radii).reshape(-1)

    def grad(v: np.ndarray) -> np.ndarray:
        return 2.0 * (a_tot @ v + b_tot)

    x = clip(np.zeros(n) if start is None else vectorize(start))
    z = x.copy()
    momentum = 1.0
    for it in range(OFFLINE_DAC_MAX_ITER):
        x_next = clip(z - eta * grad(z))
        mapping = float(np.linalg.norm((x - clip(x - eta * grad(x))) / eta))
        if mapping <= OFFLINE_DAC_TOL:
            x = x_next
            break
        momentum_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum**2))
        z = x_next + ((momentum - 1.0) / momentum_next) * (x_next - x)
        x, momentum = x_next, momentum_next
    else:
        raise ComparatorError(
            f"offline surrogate minimization did not reach mapping norm {OFFLINE_DAC_TOL} "
            f"within {OFFLINE_DAC_MAX_ITER} iterations (last mapping {mapping:.3g})"
        )
    policy = DacPolicy(x.reshape(pclass.H, pclass.d_u, pclass.d_x))
    value = float(x @ a_tot @ x + 2.0 * b_tot @ x + c_tot)
    return policy, value, {"iterations": it + 1, "gradient_mapping": mapping}
