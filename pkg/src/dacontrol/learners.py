"""The two online policy updates and the generic memory-loss gradient loop.

Both learners run the same control loop: play the disturbance-action policy,
observe the next state, recover the disturbance, and take a projected step
against the gradient of the stationary surrogate loss. They differ in the
step geometry: plain gradient descent with a strong-convexity schedule versus
the natural-gradient step preconditioned by the exact inverse of E[JᵀJ],
projected in the norm that matrix induces.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
import scipy.linalg

from .lds import CostSeq, LinearSystem, NoiseModel, cost_at, recover_disturbance, step
from .policy import (
    DacPolicy,
    DisturbanceRing,
    PolicyClass,
    action,
    clip_blocks,
    devectorize,
    project_weighted,
    vectorize,
)
from .stability import StabilityCertificate
from .surrogate import SurrogateModel

log = logging.getLogger(__name__)

H_CAP = 64


def auto_horizon(T: int, kappa: float, gamma: float) -> int:
    """ceil(log(T kappa^2) / gamma), floored at 1 and capped at 64 for desk scale."""
    h = int(np.ceil(np.log(max(T, 2) * kappa**2) / gamma))
    h = max(1, h)
    if h > H_CAP:
        log.warning("horizon %d exceeds the cap %d; clamping", h, H_CAP)
        h = H_CAP
    return h


@dataclass(frozen=True)
class StepSchedule:
    """1-based step sizes; eta(s) == 0 means hold the iterate at step s.

    ``ogd_strongly_convex``: 1 / (constant * (s - H)) once s > H.
    ``ong``: 1 / (constant * s) from the first step.
    """

    kind: str
    constant: float
    H: int = 0

    def __post_init__(self):
        if self.kind not in ("ogd_strongly_convex", "ong"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.constant <= 0.0:
            raise ValueError("schedule constant must be positive")

    def eta(self, s: int) -> float:
        if self.kind == "ogd_strongly_convex":
            if s <= self.H:
                return 0.0
            return 1.0 / (self.constant * (s - self.H))
        return 1.0 / (self.constant * s) if s >= 1 else 0.0


class Preconditioner:
    """Cached factorization of E[JᵀJ]; solves, never an explicit inverse."""

    def __init__(self, p_gram: np.ndarray):
        p_gram = np.asarray(p_gram, dtype=float)
        eigs = np.linalg.eigvalsh(0.5 * (p_gram + p_gram.T))
        if eigs[0] <= 0.0:
            raise np.linalg.LinAlgError(
                f"preconditioner is singular (lambda_min={eigs[0]:.3g}); "
                "the certified eigenvalue floor rules this out, so the certificate is suspect"
            )
        self.p_gram = p_gram
        self.lambda_min = float(eigs[0])
        self.lambda_max = float(eigs[-1])
        self._cho = scipy.linalg.cho_factor(p_gram)

    def solve(self, g: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._cho, g)


@dataclass
class LearnerState:
    """Mutable loop state: 1-based step counter, current policy, history ring."""

    s: int
    policy: DacPolicy
    ring: DisturbanceRing
    schedule: StepSchedule
    pclass: PolicyClass
    preconditioner: Optional[Preconditioner] = None
    ong_euclidean_fallback: bool = False


def ogd_step(state: LearnerState, grad: np.ndarray) -> LearnerState:
    """Projected gradient step at the schedule's current rate; advances the counter."""
    eta = state.schedule.eta(state.s)
    if eta > 0.0:
        v = vectorize(state.policy) - eta * np.asarray(grad, dtype=float)
        blocks = clip_blocks(v.reshape(state.policy.blocks.shape), state.pclass.radii)
        state.policy = DacPolicy(blocks)
    state.s += 1
    return state


def ong_step(state: LearnerState, grad: np.ndarray) -> LearnerState:
    """Natural-gradient step: solve against E[JᵀJ], project in its norm."""
    if state.preconditioner is None:
        raise ValueError("natural-gradient updates need a preconditioner")
    eta = state.schedule.eta(state.s)
    if eta > 0.0:
        pre = state.preconditioner
        v = vectorize(state.policy) - eta * pre.solve(np.asarray(grad, dtype=float))
        moved = devectorize(v, state.pclass.H, state.pclass.d_u, state.pclass.d_x)
        if state.ong_euclidean_fallback:
            state.policy = DacPolicy(clip_blocks(moved.blocks, state.pclass.radii))
        else:
            state.policy = project_weighted(
                moved, state.pclass, pre.p_gram, p_lmax=pre.lambda_max
            )
    state.s += 1
    return state


@dataclass
class RunLog:
    """Everything a control run produced, step-indexed from 1."""

    variant: str
    H: int
    states: np.ndarray
    actions: np.ndarray
    disturbances: np.ndarray
    per_step_costs: np.ndarray
    etas: np.ndarray
    snapshots: Dict[int, DacPolicy]
    final_policy: DacPolicy
    policies: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    def policy_at(self, s: int) -> DacPolicy:
        """Policy in force at 1-based step s; needs a full-history run."""
        if self.policies is None:
            raise ValueError("run was logged without full policy history")
        if s < 1:
            return DacPolicy(self.policies[0])
        return DacPolicy(self.policies[min(s, self.T) - 1])


def run_online_control(
    sys: LinearSystem,
    cert: StabilityCertificate,
    noise_seq: np.ndarray,
    costs: CostSeq,
    variant: str,
    T: int,
    H: Optional[int] = None,
    noise_model: Optional[NoiseModel] = None,
    Sigma: Optional[np.ndarray] = None,
    model: Optional[SurrogateModel] = None,
    schedule_constant: Optional[float] = None,
    cost_alpha: Optional[float] = None,
    store_policies: bool = False,
    ong_euclidean_fallback: bool = False,
) -> RunLog:
    """Run one learner for T steps on a fixed disturbance realization.

    The gradient at each step is the exact derivative of the stationary
    surrogate loss, so it uses the noise model's moments, never the realized
    disturbances; those only drive the executed trajectory. With the schedule
    constant left unset, gradient descent uses twice the cost's strong
    convexity times the measured smallest eigenvalue of E[JᵀJ] (the measured
    counterpart of the closed-form floor) and the natural-gradient variant
    uses the cost's strong convexity itself.
    """
    if variant not in ("ogd", "ong"):
        raise ValueError(f"variant must be 'ogd' or 'ong', got {variant!r}")
    noise_seq = np.asarray(noise_seq, dtype=float)
    if noise_seq.shape != (T, sys.d_x):
        raise ValueError(f"noise realization must have shape ({T}, {sys.d_x})")
    if H is None:
        H = auto_horizon(T, cert.kappa, cert.gamma)
    if model is None:
        model = SurrogateModel(sys, cert.K, H, noise_model=noise_model, Sigma=Sigma)
    elif model.H != H:
        raise ValueError(f"surrogate model horizon {model.H} does not match H={H}")
    pclass = PolicyClass.from_stability(cert.kappa, cert.gamma, sys.kappa_B, H, sys.d_u, sys.d_x)
    if cost_alpha is None:
        cost_alpha = cost_at(costs, 1).alpha
    precond = Preconditioner(model.p_gram)
    if variant == "ogd":
        constant = schedule_constant or 2.0 * cost_alpha * precond.lambda_min
        schedule = StepSchedule("ogd_strongly_convex", constant, H)
    else:
        constant = schedule_constant or cost_alpha
        schedule = StepSchedule("ong", constant, H)

    state = LearnerState(
        s=1,
        policy=DacPolicy.zeros(H, sys.d_u, sys.d_x),
        ring=DisturbanceRing(H, sys.d_x),
        schedule=schedule,
        pclass=pclass,
        preconditioner=precond,
        ong_euclidean_fallback=ong_euclidean_fallback,
    )
    update = ogd_step if variant == "ogd" else ong_step

    states = np.zeros((T + 1, sys.d_x))
    actions = np.zeros((T, sys.d_u))
    disturbances = np.zeros((T, sys.d_x))
    per_step_costs = np.zeros(T)
    etas = np.zeros(T)
    snapshots: Dict[int, DacPolicy] = {}
    policies = np.zeros((T,) + state.policy.blocks.shape) if store_policies else None

    a_mat, b_mat = sys.A, sys.B
    k_fixed = cert.K
    for t in range(T):
        s = t + 1
        x = states[t]
        policy = state.policy
        if policies is not None:
            policies[t] = policy.blocks
        if (s & (s - 1)) == 0 or s == T:
            snapshots[s] = policy
        u = action(policy, k_fixed, x, state.ring)
        actions[t] = u
        x_next = a_mat @ x + b_mat @ u + noise_seq[t]
        states[t + 1] = x_next
        w_rec = x_next - a_mat @ x - b_mat @ u
        disturbances[t] = w_rec
        state.ring.push(w_rec)
        cost = cost_at(costs, s)
        per_step_costs[t] = cost.value(x, u)
        a_f, b_f, _ = model.quadratic_form(cost)
        grad = 2.0 * (a_f @ vectorize(policy) + b_f)
        etas[t] = state.schedule.eta(s)
        state = update(state, grad)

    return RunLog(
        variant=variant,
        H=H,
        states=states,
        actions=actions,
        disturbances=disturbances,
        per_step_costs=per_step_costs,
        etas=etas,
        snapshots=snapshots,
        final_policy=state.policy,
        policies=policies,
    )


def ogd_with_memory(
    grad_fn: Callable[[int, np.ndarray], np.ndarray],
    project_fn: Callable[[np.ndarray], np.ndarray],
    lam: float,
    H: int,
    T: int,
    x0: np.ndarray,
) -> np.ndarray:
    """Generic loop x_{s+1} = project(x_s - eta_s grad(s, x_s)), eta_s = 1/(lam (s-H)).

    The control learner is this loop specialized to surrogate losses; it is
    exposed on its own so memory-loss regret properties can be checked on
    synthetic objectives. Returns the played points x_1..x_T plus the final
    iterate, stacked. H = 0 is standard strongly convex gradient descent.
    """
    schedule = StepSchedule("ogd_strongly_convex", lam, H)
    x = np.asarray(x0, dtype=float).copy()
    out = np.zeros((T + 1, x.size))
    for s in range(1, T + 1):
        out[s - 1] = x
        eta = schedule.eta(s)
        if eta > 0.0:
            x = np.asarray(project_fn(x - eta * np.asarray(grad_fn(s, x), dtype=float)))
    out[T] = x
    return out


def recover_and_push(sys: LinearSystem, ring: DisturbanceRing, x, u, x_next) -> np.ndarray:
    """Record the disturbance revealed by a transition, as the control loop does."""
    w = recover_disturbance(sys, x, u, x_next)
    ring.push(w)
    return w
