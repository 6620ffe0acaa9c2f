import numpy as np
import pytest

from dacontrol import (
    DacPolicy,
    LinearSystem,
    NoiseModel,
    QuadraticCost,
    SurrogateModel,
    expected_gram,
    jacobian,
    monte_carlo_gram,
    psi,
    psi_nonstationary,
    read_gram,
    surrogate_cost_and_grad,
    surrogate_pair,
    vectorize,
    write_gram,
)
from dacontrol.policy import devectorize
from dacontrol.rng import substream
from dacontrol.surrogate import (
    batched_jacobian,
    gram_bilinear,
    monte_carlo_cost_and_grad,
    surrogate_intercept,
    toeplitz_indicator,
)


def _scalar(v):
    return np.array([[float(v)]])


def _stationary(m_value, H):
    return [DacPolicy(_scalar(m_value)[None]) if H == 1 else DacPolicy(np.full((H, 1, 1), m_value))]


# ---------------------------------------------------------------------------
# Transfer matrices


def test_psi_zero_policy_powers():
    a_t, b = _scalar(0.5), _scalar(1.0)
    policies = [DacPolicy.zeros(2, 1, 1)] * 3
    values = [psi(policies, i, a_t, b)[0, 0] for i in range(5)]
    np.testing.assert_allclose(values, [1.0, 0.5, 0.25, 0.0, 0.0])


def test_psi_single_block_coefficients():
    # two-step unroll of the closed loop reads off the disturbance coefficients
    m = 0.7
    policies = [DacPolicy(np.array([[[m]]]))] * 2
    a_t, b = _scalar(0.5), _scalar(1.0)
    assert psi(policies, 0, a_t, b)[0, 0] == pytest.approx(1.0)
    assert psi(policies, 1, a_t, b)[0, 0] == pytest.approx(0.5 + m)
    assert psi(policies, 2, a_t, b)[0, 0] == pytest.approx(0.5 * m)


def test_psi_linearity():
    rng = substream(30, "psilin")
    H, d_x, d_u = 3, 2, 2
    a_t = 0.3 * rng.standard_normal((d_x, d_x))
    b = rng.standard_normal((d_x, d_u))
    pa = [DacPolicy(rng.standard_normal((H, d_u, d_x))) for _ in range(H + 1)]
    pb = [DacPolicy(rng.standard_normal((H, d_u, d_x))) for _ in range(H + 1)]
    psum = [DacPolicy(x.blocks + y.blocks) for x, y in zip(pa, pb)]
    zero = [DacPolicy.zeros(H, d_u, d_x)] * (H + 1)
    for i in range(2 * H + 1):
        lhs = psi(psum, i, a_t, b)
        rhs = psi(pa, i, a_t, b) + psi(pb, i, a_t, b) - psi(zero, i, a_t, b)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_psi_index_bounds():
    policies = [DacPolicy.zeros(2, 1, 1)] * 3
    with pytest.raises(ValueError):
        psi(policies, 5, _scalar(0.5), _scalar(1.0))


def test_psi_nonstationary_collapses_to_stationary():
    rng = substream(31, "psins")
    H = 3
    a_t, b = _scalar(0.4), _scalar(1.0)
    policy = DacPolicy(rng.standard_normal((H, 1, 1)))
    stationary = [policy] * (H + 1)
    for i in range(2 * H + 1):
        lhs = psi_nonstationary(stationary, i, H, a_t, b, H)
        np.testing.assert_allclose(lhs, psi(stationary, i, a_t, b))


def test_psi_nonstationary_h_zero():
    out0 = psi_nonstationary([DacPolicy.zeros(2, 1, 1)], 0, 0, _scalar(0.5), _scalar(1.0), 2)
    np.testing.assert_allclose(out0, [[1.0]])
    out1 = psi_nonstationary([DacPolicy.zeros(2, 1, 1)], 1, 0, _scalar(0.5), _scalar(1.0), 2)
    np.testing.assert_allclose(out1, [[0.0]])


def test_psi_nonstationary_staircase_two_step_oracle():
    # hand unroll: x_{t+1} = A x_t + B m1 w_{t-1} + w_t, x_t = A x_{t-1} + B m0 w_{t-2} + w_{t-1}
    m0, m1, a, b = 0.3, -0.2, 0.5, 2.0
    policies = [DacPolicy(np.array([[[m0]]])), DacPolicy(np.array([[[m1]]]))]
    a_t, b_m = _scalar(a), _scalar(b)
    assert psi_nonstationary(policies, 0, 1, a_t, b_m, 1)[0, 0] == pytest.approx(1.0)
    assert psi_nonstationary(policies, 1, 1, a_t, b_m, 1)[0, 0] == pytest.approx(a + b * m1)
    assert psi_nonstationary(policies, 2, 1, a_t, b_m, 1)[0, 0] == pytest.approx(a * b * m0)


# ---------------------------------------------------------------------------
# Surrogate pair


def test_surrogate_pair_zero_window():
    H = 3
    policies = [DacPolicy(np.ones((H, 1, 1)))] * (H + 2)
    y, v = surrogate_pair(policies, np.zeros((2 * H, 1)), _scalar(0.3), _scalar(0.5), _scalar(1.0))
    np.testing.assert_array_equal(y, [0.0])
    np.testing.assert_array_equal(v, [0.0])


def test_surrogate_pair_zero_policy_power_sum():
    rng = substream(32, "pairfree")
    H = 4
    window = rng.standard_normal((2 * H, 1))
    policies = [DacPolicy.zeros(H, 1, 1)] * (H + 2)
    y, v = surrogate_pair(policies, window, _scalar(0.0), _scalar(0.5), _scalar(1.0))
    expected = sum(0.5**i * window[2 * H - 1 - i, 0] for i in range(H + 1))
    assert y[0] == pytest.approx(expected, abs=1e-14)
    assert v[0] == pytest.approx(0.0)


def test_surrogate_pair_matches_rollout():
    # literal 2H-step rollout oracle; truncation terms are |A|^{H+1}-small
    rng = substream(33, "pairroll")
    H = 25
    a, b, k, m_scale = 0.3, 1.0, 0.1, 0.2
    blocks = m_scale * (0.5 ** np.arange(H))[:, None, None] * rng.standard_normal((H, 1, 1))
    policy = DacPolicy(blocks)
    window = rng.standard_normal((2 * H, 1))
    a_t = _scalar(a - b * k)
    y, v = surrogate_pair([policy] * (H + 2), window, _scalar(k), a_t, _scalar(b))
    x = np.zeros(1)
    for t in range(2 * H):
        u = -k * x + sum(
            blocks[i - 1, 0, 0] * window[t - i, 0] for i in range(1, H + 1) if t - i >= 0
        )
        x = a * x + b * u + window[t]
    u_final = -k * x + sum(blocks[i - 1, 0, 0] * window[2 * H - i, 0] for i in range(1, H + 1))
    assert abs(y[0] - x[0]) <= 1e-10
    assert abs(v[0] - u_final[0]) <= 1e-10


# ---------------------------------------------------------------------------
# Jacobian


def test_jacobian_scalar_h1_example():
    sys1 = LinearSystem([[0.5]], [[2.0]])
    window = np.array([[0.3], [0.7]])  # w0, w1
    j = jacobian(window, sys1, _scalar(0.0), 1)
    np.testing.assert_allclose(j, [[2.0 * 0.3], [0.7]])


def test_jacobian_zero_gain_direct_block():
    rng = substream(34, "jk0")
    H, d_x, d_u = 2, 2, 2
    sys_ = LinearSystem(0.4 * rng.standard_normal((d_x, d_x)), rng.standard_normal((d_x, d_u)))
    window = rng.standard_normal((2 * H, d_x))
    j = jacobian(window, sys_, np.zeros((d_u, d_x)), H)
    j_v = j[d_x:]
    expected = np.zeros((d_u, H * d_u * d_x))
    for blk in range(H):
        expected[:, blk * d_u * d_x : (blk + 1) * d_u * d_x] = np.kron(
            np.eye(d_u), window[2 * H - 1 - blk][None, :]
        )
    np.testing.assert_allclose(j_v, expected, atol=1e-14)


def test_jacobian_affine_identity():
    rng = substream(35, "affine")
    for _ in range(100):
        d_x, d_u, H = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        a = 0.4 * rng.standard_normal((d_x, d_x))
        b = rng.standard_normal((d_x, d_u))
        k = 0.3 * rng.standard_normal((d_u, d_x))
        sys_ = LinearSystem(a, b)
        a_t = a - b @ k
        window = rng.standard_normal((2 * H, d_x))
        policy = DacPolicy(rng.standard_normal((H, d_u, d_x)))
        y, v = surrogate_pair([policy] * (H + 2), window, k, a_t, b)
        z = np.concatenate([y, v])
        z0 = surrogate_intercept(window, a_t, k)
        j = jacobian(window, sys_, k, H)
        np.testing.assert_allclose(z - z0, j @ vectorize(policy), atol=1e-12)


def test_jacobian_finite_difference():
    rng = substream(36, "jfd")
    H, d_x, d_u = 2, 2, 1
    a = 0.3 * rng.standard_normal((d_x, d_x))
    b = rng.standard_normal((d_x, d_u))
    k = 0.2 * rng.standard_normal((d_u, d_x))
    sys_ = LinearSystem(a, b)
    a_t = a - b @ k
    window = rng.standard_normal((2 * H, d_x))
    j = jacobian(window, sys_, k, H)
    policy = DacPolicy(rng.standard_normal((H, d_u, d_x)))
    eps = 1e-6
    for col in range(H * d_u * d_x):
        e = np.zeros(H * d_u * d_x)
        e[col] = 1.0
        plus = devectorize(vectorize(policy) + eps * e, H, d_u, d_x)
        minus = devectorize(vectorize(policy) - eps * e, H, d_u, d_x)
        zp = np.concatenate(surrogate_pair([plus] * (H + 2), window, k, a_t, b))
        zm = np.concatenate(surrogate_pair([minus] * (H + 2), window, k, a_t, b))
        fd = (zp - zm) / (2 * eps)
        denom = max(np.linalg.norm(j[:, col]), 1e-12)
        assert np.linalg.norm(fd - j[:, col]) / denom <= 1e-8


# ---------------------------------------------------------------------------
# Exact second moments


def test_expected_gram_scalar_example():
    sys1 = LinearSystem([[0.5]], [[1.0]])
    g = expected_gram(sys1, [[0.0]], 1, np.eye(1))
    assert g[0, 0] == pytest.approx(2.0)


def test_expected_gram_zero_gain_direct_part():
    # with K = 0 the action block contributes I_{H d_u} (x) Sigma
    rng = substream(37, "gk0")
    d_x, d_u, H = 2, 2, 3
    a = 0.4 * rng.standard_normal((d_x, d_x))
    b = rng.standard_normal((d_x, d_u))
    sigma = np.diag([1.0, 2.0])
    direct = gram_bilinear(a, b, np.zeros((d_u, d_x)), H, sigma, np.zeros((d_x, d_x)), np.eye(d_u))
    np.testing.assert_allclose(direct, np.kron(np.eye(H * d_u), sigma), atol=1e-12)


def test_expected_gram_monte_carlo_oracle():
    rng = substream(38, "gmc")
    for trial in range(3):
        d_x, d_u, H = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 7))
        a = 0.4 * rng.standard_normal((d_x, d_x))
        b = rng.standard_normal((d_x, d_u))
        k = 0.2 * rng.standard_normal((d_u, d_x))
        sys_ = LinearSystem(a, b)
        noise = NoiseModel.sphere_uniform(d_x, float(rng.uniform(0.5, 2.0)))
        model = SurrogateModel(sys_, k, H, noise_model=noise)
        mc = monte_carlo_gram(model, 10**5, seed=100 + trial)
        rel = np.linalg.norm(mc - model.p_gram) / np.linalg.norm(model.p_gram)
        assert rel <= 0.05
        sym_err = np.max(np.abs(model.p_gram - model.p_gram.T))
        assert sym_err <= 1e-12


def test_expected_gram_psd():
    rng = substream(39, "gpsd")
    for _ in range(10):
        d_x, d_u, H = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        sys_ = LinearSystem(0.4 * rng.standard_normal((d_x, d_x)), rng.standard_normal((d_x, d_u)))
        k = 0.2 * rng.standard_normal((d_u, d_x))
        g = expected_gram(sys_, k, H, np.eye(d_x))
        assert np.linalg.eigvalsh(g)[0] >= -1e-10


# ---------------------------------------------------------------------------
# Surrogate cost and gradient


def _scalar_model(a=0.5, b=1.0, k=0.0, H=2, W=1.0):
    sys1 = LinearSystem([[a]], [[b]])
    noise = NoiseModel.scaled_rademacher(1, W)
    return SurrogateModel(sys1, [[k]], H, noise_model=noise)


def test_surrogate_cost_moment_sum_example():
    # E[y^2] for M = 0, K = 0: sum of squared transfer powers times sigma^2
    model = _scalar_model()
    cost = QuadraticCost.spherical(1.0, 1, 1)
    value, _ = surrogate_cost_and_grad(cost, DacPolicy.zeros(2, 1, 1), model)
    assert value == pytest.approx(1.3125)


def test_surrogate_gradient_finite_difference():
    rng = substream(40, "sfd")
    d_x, d_u, H = 2, 2, 3
    a = 0.4 * rng.standard_normal((d_x, d_x))
    b = rng.standard_normal((d_x, d_u))
    k = 0.2 * rng.standard_normal((d_u, d_x))
    sys_ = LinearSystem(a, b)
    noise = NoiseModel.sphere_uniform(d_x, 1.0)
    model = SurrogateModel(sys_, k, H, noise_model=noise)
    q = rng.standard_normal((d_x, d_x))
    cost = QuadraticCost(q.T @ q + np.eye(d_x), np.eye(d_u))
    policy = DacPolicy(0.3 * rng.standard_normal((H, d_u, d_x)))
    _, grad = surrogate_cost_and_grad(cost, policy, model)
    v = vectorize(policy)
    eps = 1e-5
    fd = np.zeros_like(v)
    for j in range(v.size):
        vp, vm = v.copy(), v.copy()
        vp[j] += eps
        vm[j] -= eps
        fp, _ = surrogate_cost_and_grad(cost, devectorize(vp, H, d_u, d_x), model)
        fm, _ = surrogate_cost_and_grad(cost, devectorize(vm, H, d_u, d_x), model)
        fd[j] = (fp - fm) / (2 * eps)
    assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) <= 1e-9


def test_monte_carlo_value_matches_closed_form():
    rng = substream(41, "mcv")
    model = _scalar_model(a=0.6, b=1.0, k=0.3, H=3)
    policy = DacPolicy(0.2 * rng.standard_normal((3, 1, 1)))
    cost = QuadraticCost.spherical(1.5, 1, 1)
    value, grad = surrogate_cost_and_grad(cost, policy, model)
    stats = monte_carlo_cost_and_grad(cost, policy, model, 10**5, seed=5)
    assert abs(stats["value"] - value) <= 3.0 * stats["value_se"]
    assert np.linalg.norm(stats["grad"] - grad) <= 3.0 * np.linalg.norm(stats["grad_se"])


def test_monte_carlo_gradient_unbiased_over_seeds():
    rng = substream(42, "mcu")
    model = _scalar_model(a=0.5, b=1.0, k=0.2, H=2)
    policy = DacPolicy(0.2 * rng.standard_normal((2, 1, 1)))
    cost = QuadraticCost.spherical(1.0, 1, 1)
    _, grad = surrogate_cost_and_grad(cost, policy, model)
    samples = np.stack(
        [
            monte_carlo_cost_and_grad(cost, policy, model, 2000, seed=s)["grad"]
            for s in range(20)
        ]
    )
    se = samples.std(axis=0, ddof=1) / np.sqrt(20)
    assert np.all(np.abs(samples.mean(axis=0) - grad) <= 3.0 * se)


def test_monte_carlo_is_deterministic_per_seed():
    model = _scalar_model()
    policy = DacPolicy.zeros(2, 1, 1)
    cost = QuadraticCost.spherical(1.0, 1, 1)
    a = surrogate_cost_and_grad(cost, policy, model, mode="monte_carlo", n_samples=500, seed=9)
    b = surrogate_cost_and_grad(cost, policy, model, mode="monte_carlo", n_samples=500, seed=9)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_closed_form_requires_quadratic_cost():
    model = _scalar_model()
    with pytest.raises(TypeError):
        surrogate_cost_and_grad(object(), DacPolicy.zeros(2, 1, 1), model)


def test_hessian_dominates_scaled_gram():
    rng = substream(43, "hess")
    d_x, d_u, H = 2, 1, 3
    sys_ = LinearSystem(0.4 * rng.standard_normal((d_x, d_x)), rng.standard_normal((d_x, d_u)))
    k = 0.2 * rng.standard_normal((d_u, d_x))
    sigma = np.eye(d_x) * 0.7
    q = rng.standard_normal((d_x, d_x))
    cost = QuadraticCost(q.T @ q + 0.5 * np.eye(d_x), np.eye(d_u) * 2.0)
    a_t = sys_.A - sys_.B @ k
    hessian = 2.0 * gram_bilinear(a_t, sys_.B, k, H, sigma, cost.Q, cost.R)
    gram = expected_gram(sys_, k, H, sigma)
    assert np.linalg.eigvalsh(hessian - cost.alpha * gram)[0] >= -1e-8


def test_toeplitz_indicator_structure():
    t1 = toeplitz_indicator(1, 3)
    np.testing.assert_array_equal(t1, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(toeplitz_indicator(0, 4), np.eye(4))
    np.testing.assert_array_equal(toeplitz_indicator(-2, 4), toeplitz_indicator(2, 4).T)


def test_gram_binary_round_trip(tmp_path):
    rng = substream(44, "bin")
    m = rng.standard_normal((5, 5))
    path = tmp_path / "gram.bin"
    write_gram(path, m)
    np.testing.assert_array_equal(read_gram(path), m)
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"nope" + b"\x00" * 20)
        read_gram(bad)


def test_batched_jacobian_matches_single():
    rng = substream(45, "batch")
    H, d_x, d_u = 3, 2, 2
    a = 0.4 * rng.standard_normal((d_x, d_x))
    b = rng.standard_normal((d_x, d_u))
    k = 0.2 * rng.standard_normal((d_u, d_x))
    sys_ = LinearSystem(a, b)
    windows = rng.standard_normal((7, 2 * H, d_x))
    batch = batched_jacobian(windows, a - b @ k, b, k)
    for idx in range(7):
        np.testing.assert_allclose(batch[idx], jacobian(windows[idx], sys_, k, H), atol=1e-13)
