"""One-shot numerical certification of every spectral and gradient claim.

Each check runs a seeded sweep, records measured extremes against the stated
bound, and reports pass/fail; the suite fails when any executed check fails.
``reduced=True`` runs smaller sweeps and marks the Monte-Carlo-heavy checks
as skipped.
"""
from __future__ import annotations

import time
from typing import Callable, Optional

import numpy as np

from ..lds import NoiseModel, QuadraticCost
from ..policy import DacPolicy, devectorize, vectorize
from ..rng import substream
from ..spectral import (
    FLOOR_TOL,
    G_FLOOR,
    certify_strong_convexity,
    random_certified_system,
    sweep_certified_systems,
    sweep_psi_grid,
)
from ..surrogate import (
    SurrogateModel,
    expected_gram,
    gram_bilinear,
    monte_carlo_cost_and_grad,
    monte_carlo_gram,
    surrogate_cost_and_grad,
)

DEFAULT_SEED = 20240601


def _random_quadratic(rng: np.random.Generator, d_x: int, d_u: int) -> QuadraticCost:
    f = rng.standard_normal((d_x, d_x))
    g = rng.standard_normal((d_u, d_u))
    return QuadraticCost(f.T @ f + 0.5 * np.eye(d_x), g.T @ g + 0.5 * np.eye(d_u))


def _random_feasible_policy(rng: np.random.Generator, H: int, d_u: int, d_x: int) -> DacPolicy:
    blocks = 0.2 * rng.standard_normal((H, d_u, d_x)) * (0.6 ** np.arange(H))[:, None, None]
    return DacPolicy(blocks)


def check_g_inverse_analytic(seed: int, n_psi: int = 200) -> dict:
    reports = sweep_psi_grid(n_psi, range(3, 33), seed)
    max_residual = max(r.inverse_residual for r in reports)
    coeff_extreme = max(
        max(abs(r.a), abs(r.alpha)) for r in reports
    )
    offdiag_extreme = max(max(abs(r.b), abs(r.beta)) for r in reports)
    passed = all(r.residual_ok and r.coefficients_ok and r.inverse_norm_ok for r in reports)
    return {
        "passed": bool(passed),
        "points": len(reports),
        "grid": {"h_range": [3, 32], "max_magnitude": 0.95},
        "max_residual": float(max_residual),
        "max_diag_coefficient": float(coeff_extreme),
        "max_offdiag_coefficient": float(offdiag_extreme),
        "max_inverse_norm": float(max(r.inverse_norm for r in reports)),
    }


def check_g_quarter_floor(seed: int, n_psi: int = 200) -> dict:
    reports = sweep_psi_grid(n_psi, range(3, 33), seed)
    reports += sweep_psi_grid(8, [64], seed + 1)
    lam_min = min(r.lambda_min for r in reports)
    return {
        "passed": bool(all(r.floor_ok for r in reports)),
        "points": len(reports),
        "grid": {"h_range": [3, 32], "h_edge": 64, "max_magnitude": 0.95},
        "min_eigenvalue": float(lam_min),
        "floor": G_FLOOR,
    }


def check_gram_floor(seed: int, n_systems: int = 100) -> dict:
    rng = substream(seed, "gram_floor")
    min_margin = np.inf
    min_hessian_margin = np.inf
    for _ in range(n_systems):
        sys_, cert = random_certified_system(rng)
        h = int(rng.integers(1, 9))
        sigma = np.eye(sys_.d_x) * float(rng.uniform(0.5, 2.0))
        rep = certify_strong_convexity(sys_, cert, sigma, h)
        min_margin = min(min_margin, rep.lambda_min - rep.floor)
        cost = _random_quadratic(rng, sys_.d_x, sys_.d_u)
        a_tilde = cert.a_tilde()
        hessian = 2.0 * gram_bilinear(a_tilde, sys_.B, cert.K, h, sigma, cost.Q, cost.R)
        gram = expected_gram(sys_, cert.K, h, sigma)
        gap = float(np.linalg.eigvalsh(hessian - cost.alpha * gram)[0])
        min_hessian_margin = min(min_hessian_margin, gap)
    return {
        "passed": bool(min_margin >= -FLOOR_TOL and min_hessian_margin >= -1e-8),
        "systems": n_systems,
        "min_floor_margin": float(min_margin),
        "min_hessian_margin": float(min_hessian_margin),
    }


def check_gram_monte_carlo(seed: int, n_systems: int = 10, n_samples: int = 10**5) -> dict:
    rng = substream(seed, "gram_mc")
    worst = 0.0
    for i in range(n_systems):
        sys_, cert = random_certified_system(rng)
        h = int(rng.integers(1, 7))
        noise = NoiseModel.sphere_uniform(sys_.d_x, float(rng.uniform(0.5, 2.0)))
        model = SurrogateModel(sys_, cert.K, h, noise_model=noise)
        mc = monte_carlo_gram(model, n_samples, seed + 17 * i)
        rel = float(np.linalg.norm(mc - model.p_gram) / np.linalg.norm(model.p_gram))
        worst = max(worst, rel)
    return {"passed": bool(worst <= 0.05), "systems": n_systems, "worst_rel_frobenius": worst}


def check_y_and_g_bounds(seed: int, n_systems: int = 200, H: int = 12) -> dict:
    res = sweep_certified_systems(n_systems, H, seed, d_x_max=4)
    return {
        "passed": bool(res.all_ok),
        "systems": n_systems,
        "y_norm_margin_min": float(res.y_norm_margin_min),
        "g_identity_floor_margin_min": float(res.g_floor_margin_min),
        "scalar_symmetrized_margin_min": float(res.scalar_sym_margin_min),
    }


def check_gradient_fd(seed: int, n_instances: int = 10) -> dict:
    rng = substream(seed, "grad_fd")
    worst = 0.0
    for _ in range(n_instances):
        sys_, cert = random_certified_system(rng)
        h = int(rng.integers(1, 5))
        noise = NoiseModel.sphere_uniform(sys_.d_x, 1.0)
        model = SurrogateModel(sys_, cert.K, h, noise_model=noise)
        cost = _random_quadratic(rng, sys_.d_x, sys_.d_u)
        policy = _random_feasible_policy(rng, h, sys_.d_u, sys_.d_x)
        _, grad = surrogate_cost_and_grad(cost, policy, model)
        v = vectorize(policy)
        eps = 1e-5
        fd = np.zeros_like(v)
        for j in range(v.size):
            vp, vm = v.copy(), v.copy()
            vp[j] += eps
            vm[j] -= eps
            fp, _ = surrogate_cost_and_grad(cost, devectorize(vp, h, sys_.d_u, sys_.d_x), model)
            fm, _ = surrogate_cost_and_grad(cost, devectorize(vm, h, sys_.d_u, sys_.d_x), model)
            fd[j] = (fp - fm) / (2.0 * eps)
        rel = float(np.linalg.norm(fd - grad) / max(np.linalg.norm(grad), 1e-12))
        worst = max(worst, rel)
    return {"passed": bool(worst <= 1e-8), "instances": n_instances, "worst_rel_error": worst}


def check_gradient_mc(seed: int, n_instances: int = 20, n_samples: int = 10**4) -> dict:
    rng = substream(seed, "grad_mc")
    worst_z = 0.0
    for i in range(n_instances):
        sys_, cert = random_certified_system(rng)
        h = int(rng.integers(1, 5))
        noise = NoiseModel.sphere_uniform(sys_.d_x, float(rng.uniform(0.5, 2.0)))
        model = SurrogateModel(sys_, cert.K, h, noise_model=noise)
        cost = _random_quadratic(rng, sys_.d_x, sys_.d_u)
        policy = _random_feasible_policy(rng, h, sys_.d_u, sys_.d_x)
        _, grad = surrogate_cost_and_grad(cost, policy, model)
        stats = monte_carlo_cost_and_grad(cost, policy, model, n_samples, seed + 31 * i)
        se = float(np.linalg.norm(stats["grad_se"]))
        z = float(np.linalg.norm(stats["grad"] - grad)) / max(se, 1e-300)
        worst_z = max(worst_z, z)
    return {"passed": bool(worst_z <= 3.0), "instances": n_instances, "worst_z": worst_z}


def check_gram_mc_convergence(seed: int, repeats: int = 10) -> dict:
    rng = substream(seed, "gram_mc_slope")
    sys_, cert = random_certified_system(rng, d_x_max=2, d_u_max=2)
    noise = NoiseModel.sphere_uniform(sys_.d_x, 1.0)
    model = SurrogateModel(sys_, cert.K, 4, noise_model=noise)
    sizes = [10**3, 10**4, 10**5]
    errors = []
    for i, n in enumerate(sizes):
        # one realization of the error is too noisy for a 3-point slope fit
        errs = [
            float(np.linalg.norm(monte_carlo_gram(model, n, seed + 101 * i + 7 * rep) - model.p_gram))
            for rep in range(repeats)
        ]
        errors.append(float(np.mean(errs)))
    slope = float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])
    return {
        "passed": bool(abs(slope + 0.5) <= 0.1),
        "sizes": sizes,
        "errors": errors,
        "slope": slope,
    }


def verify_suite(reduced: bool = False, seed: int = DEFAULT_SEED) -> dict:
    """Run every certification sweep; returns a JSON-ready report."""
    plan: list[tuple[str, Optional[Callable[[], dict]]]] = [
        ("g_inverse_analytic", lambda: check_g_inverse_analytic(seed, 60 if reduced else 200)),
        ("g_quarter_floor", lambda: check_g_quarter_floor(seed, 60 if reduced else 200)),
        ("gram_eigenvalue_floor", lambda: check_gram_floor(seed, 20 if reduced else 100)),
        ("gram_monte_carlo", None if reduced else lambda: check_gram_monte_carlo(seed)),
        ("y_and_g_identity_bounds", lambda: check_y_and_g_bounds(seed, 50 if reduced else 200)),
        ("gradient_finite_difference", lambda: check_gradient_fd(seed, 5 if reduced else 10)),
        ("gradient_monte_carlo", lambda: check_gradient_mc(seed, 5 if reduced else 20)),
        ("gram_mc_convergence", None if reduced else lambda: check_gram_mc_convergence(seed)),
    ]
    checks = []
    all_pass = True
    for name, runner in plan:
        if runner is None:
            checks.append({"name": name, "skipped": True})
            continue
        start = time.perf_counter()
        result = runner()
        result.update({"name": name, "skipped": False, "seconds": round(time.perf_counter() - start, 3)})
        checks.append(result)
        all_pass = all_pass and result["passed"]
    return {"all_pass": bool(all_pass), "reduced": bool(reduced), "seed": seed, "checks": checks}
