"""Experiment driver: replicated learner runs, comparators, regret reports,
and the surrogate-versus-realized accounting check.
"""
from __future__ import annotations

import os
from typing import Dict, Optional

import numpy as np

from ..lds import CostSeq, cost_at
from ..learners import RunLog, auto_horizon, run_online_control
from ..policy import DacPolicy, PolicyClass
from ..rng import substream
from ..stability import StabilityCertificate, certify, default_gain
from ..surrogate import SurrogateModel, matrix_powers, psi_nonstationary, write_gram
from .comparators import best_linear_comparator, dac_cost_series, linear_cost_series, offline_best_dac
from .config import ConfigError, ExperimentConfig, cost_stream
from .report import build_regret_entry, comment_block, write_csv, write_json, write_tsv

FIT_WINDOW_LO = 1024


def surrogate_vs_realized(
    log: RunLog,
    model: SurrogateModel,
    costs: CostSeq,
    cert: StabilityCertificate,
    W: float,
) -> dict:
    """Total surrogate loss of the played policy windows against realized cost.

    The surrogate at step s is the cost of the truncated state/action built
    from the last H+1 policies and 2H+1 disturbances (zero-padded before the
    start), evaluated on the realized noise. The gap is compared with the
    evaluated closed-form truncation bound 2 T G D^2 kappa^3 (1-gamma)^{H+1}.
    """
    if log.policies is None:
        raise ValueError("surrogate accounting needs a run with full policy history")
    T, H = log.T, model.H
    a_tilde, b_mat, k = model.a_tilde, model.b_mat, model.k_fixed
    d_x = a_tilde.shape[0]
    pows = matrix_powers(a_tilde, 2 * H + 1)
    dist = log.disturbances

    def w_at(step_idx: int) -> np.ndarray:
        if 1 <= step_idx <= T:
            return dist[step_idx - 1]
        return np.zeros(d_x)

    grad_scale = 0.0
    surrogate_total = 0.0
    for s in range(1, T + 1):
        policies = [log.policy_at(j) for j in range(s - 1 - H, s)]
        y = np.zeros(d_x)
        for i in range(2 * H + 1):
            w = w_at(s - 1 - i)
            if not w.any():
                continue
            y += psi_nonstationary(policies, i, H, a_tilde, b_mat, H, pows=pows) @ w
        m_s = log.policy_at(s)
        v = -k @ y
        for i in range(1, H + 1):
            v += m_s.blocks[i - 1] @ w_at(s - i)
        cost = cost_at(costs, s)
        surrogate_total += cost.value(y, v)
        grad_scale = max(grad_scale, cost.grad_scale)
    realized_total = float(log.per_step_costs.sum())
    gap = abs(surrogate_total - realized_total)

    kappa, gamma = cert.kappa, cert.gamma
    tau = kappa**3 * model.sys.kappa_B
    shrink = 1.0 - kappa**2 * (1.0 - gamma) ** (H + 1)
    if shrink <= 0.0:
        bound = float("inf")
    else:
        diameter = W * kappa**3 * (1.0 + H * model.sys.kappa_B * tau) / (gamma * shrink) + tau * W / gamma
        bound = 2.0 * T * grad_scale * diameter**2 * kappa**3 * (1.0 - gamma) ** (H + 1)
    return {
        "surrogate_total": float(surrogate_total),
        "realized_total": realized_total,
        "gap": float(gap),
        "bound": float(bound),
        "within_bound": bool(gap <= bound),
    }


def _resolve_certificate(config: ExperimentConfig) -> StabilityCertificate:
    gain = config.k_fixed if config.k_fixed is not None else default_gain(config.system)
    return certify(config.system, gain)


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    """Execute the full benchmark described by ``config`` and write its outputs.

    Files: one CSV per (variant, replica), an aggregated regret report JSON,
    and one plot-ready TSV per variant. Identical config and seed produce
    byte-identical files.
    """
    out = out_dir or config.out_dir
    os.makedirs(out, exist_ok=True)
    sys_ = config.system
    cert = _resolve_certificate(config)
    if config.cost_x_offset is not None or config.cost_u_offset is not None:
        cap = config.noise.W / cert.gamma
        for off in (config.cost_x_offset, config.cost_u_offset):
            if off is not None and np.linalg.norm(off) > cap:
                raise ConfigError(
                    f"cost offsets must stay within W/gamma = {cap:.6g} for the gradient bound to hold"
                )
    T, R = config.T, config.replicas
    H = config.H if config.H > 0 else auto_horizon(T, cert.kappa, cert.gamma)
    model = SurrogateModel(sys_, cert.K, H, noise_model=config.noise)
    costs = cost_stream(config)
    pclass = PolicyClass.from_stability(cert.kappa, cert.gamma, sys_.kappa_B, H, sys_.d_u, sys_.d_x)

    noise = np.stack(
        [config.noise.sample(substream(config.seed, "noise", r), T) for r in range(R)]
    )

    header = comment_block(config.raw_text)
    learner_series: Dict[str, np.ndarray] = {}
    final_policies: Dict[str, DacPolicy] = {}
    for variant in config.variants:
        override = {"ogd": config.ogd_lambda, "ong": config.ong_alpha}[variant]
        per_rep = np.zeros((R, T))
        for r in range(R):
            run = run_online_control(
                sys_,
                cert,
                noise[r],
                costs,
                variant,
                T,
                H=H,
                model=model,
                schedule_constant=override if override > 0.0 else None,
                cost_alpha=config.cost_alpha,
                ong_euclidean_fallback=config.ong_euclidean_fallback,
                store_policies=config.store_policies,
            )
            per_rep[r] = run.per_step_costs
            write_csv(
                os.path.join(out, f"replica_{variant}_{r:03d}.csv"),
                header,
                ["t", "cost", "x_norm", "u_norm", "eta"],
                [
                    np.arange(1, T + 1),
                    run.per_step_costs,
                    np.linalg.norm(run.states[:-1], axis=1),
                    np.linalg.norm(run.actions, axis=1),
                    run.etas,
                ],
            )
            if r == R - 1:
                final_policies[variant] = run.final_policy
                with open(
                    os.path.join(out, f"policy_snapshots_{variant}.json"), "w", encoding="utf-8", newline="\n"
                ) as fh:
                    fh.write(_snapshots_json(run, config.raw_text))
        learner_series[variant] = per_rep

    k_star, k_star_cost, k_star_info = best_linear_comparator(
        sys_,
        noise,
        costs,
        points_per_axis=config.comparator_grid,
        half_width=config.comparator_half_width,
    )
    series_k_star = linear_cost_series(sys_, k_star[None], noise, costs)[0]
    series_fixed = linear_cost_series(sys_, cert.K[None], noise, costs)[0]
    m_star, m_star_surrogate, dac_info = offline_best_dac(model, costs, T, pclass)
    series_m_star = dac_cost_series(sys_, m_star, cert.K, noise, costs)

    report = {
        "config_text": config.raw_text,
        "T": T,
        "H": H,
        "replicas": R,
        "seed": config.seed,
        "kappa": cert.kappa,
        "gamma": cert.gamma,
        "k_fixed": cert.K.tolist(),
        "comparators": {
            "best_linear": {
                "gain": k_star.tolist(),
                "mean_total_cost": float(k_star_cost),
                "per_step_cost_mean": series_k_star.mean(axis=0).tolist(),
                "avg_cost": float(series_k_star.mean()),
                "info": k_star_info,
            },
            "fixed_k": {
                "per_step_cost_mean": series_fixed.mean(axis=0).tolist(),
                "avg_cost": float(series_fixed.mean()),
            },
            "offline_best_dac": {
                "policy_block_norms": m_star.block_norms().tolist(),
                "surrogate_total": float(m_star_surrogate),
                "per_step_cost_mean": series_m_star.mean(axis=0).tolist(),
                "avg_cost": float(series_m_star.mean()),
                "info": {k: (int(v) if isinstance(v, (int, np.integer)) else float(v)) for k, v in dac_info.items()},
            },
        },
        "variants": {},
    }

    comparator_mean = series_k_star.mean(axis=0)
    for variant in config.variants:
        per_rep = learner_series[variant]
        mean_series = per_rep.mean(axis=0)
        totals = per_rep.sum(axis=1)
        entry = {
            "per_step_cost_mean": mean_series.tolist(),
            "avg_cost": float(mean_series.mean()),
            "avg_cost_se": float(totals.std(ddof=1) / np.sqrt(R) / T) if R > 1 else 0.0,
            "final_policy_block_norms": final_policies[variant].block_norms().tolist(),
        }
        entry.update(build_regret_entry(mean_series, comparator_mean, FIT_WINDOW_LO))
        report["variants"][variant] = entry

        regret = np.cumsum(mean_series - comparator_mean)
        ts = np.arange(1, T + 1)
        fits = entry["fits"]
        log_fit = fits["log2"]["a"] + fits["log2"]["b"] * np.log(ts) ** 2
        sqrt_fit = fits["sqrt"]["c"] * np.sqrt(ts)
        write_tsv(
            os.path.join(out, f"regret_{variant}.tsv"),
            header,
            ["T", "regret", "log2T_fit", "sqrtT_fit"],
            [ts, regret, log_fit, sqrt_fit],
        )

    write_json(os.path.join(out, "regret_report.json"), report)
    write_gram(os.path.join(out, "gram.bin"), model.p_gram)
    return report


def _snapshots_json(run: RunLog, config_text: str) -> str:
    import json

    payload = {
        "config_text": config_text,
        "snapshots": {str(s): p.blocks.tolist() for s, p in sorted(run.snapshots.items())},
    }
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"
