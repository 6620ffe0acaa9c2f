import numpy as np
import pytest

from dacontrol import (
    DacController,
    DacPolicy,
    DisturbanceRing,
    LinearController,
    LinearSystem,
    NoiseModel,
    PolicyClass,
    QuadraticCost,
    action,
    certify,
    devectorize,
    linear_to_dac,
    project_euclidean,
    project_weighted,
    rollout,
    vectorize,
)
from dacontrol.policy import project_spectral_ball
from dacontrol.rng import substream


def _pclass(radii):
    radii = np.asarray(radii, dtype=float)
    return PolicyClass(len(radii), 1, 1, radii)


def test_action_zero_policy_is_linear():
    ring = DisturbanceRing(2, 2)
    ring.push(np.array([1.0, -1.0]))
    policy = DacPolicy.zeros(2, 1, 2)
    k = np.array([[0.5, 0.25]])
    x = np.array([2.0, 4.0])
    np.testing.assert_allclose(action(policy, k, x, ring), -k @ x)


def test_action_zero_ring_at_start():
    ring = DisturbanceRing(3, 1)
    policy = DacPolicy(np.ones((3, 1, 1)))
    np.testing.assert_allclose(action(policy, np.array([[0.7]]), np.zeros(1), ring), [0.0])


def test_action_scalar_history_example():
    # blocks (0.3, -0.1) against history (w_{t-1}, w_{t-2}) = (1, 2)
    ring = DisturbanceRing(2, 1)
    ring.push(np.array([2.0]))
    ring.push(np.array([1.0]))
    policy = DacPolicy(np.array([[[0.3]], [[-0.1]]]))
    u = action(policy, np.array([[0.0]]), np.zeros(1), ring)
    assert u[0] == pytest.approx(0.1)


def test_vectorize_row_stacking():
    policy = DacPolicy(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_array_equal(vectorize(policy), [1.0, 2.0, 3.0, 4.0])


def test_vectorize_round_trip_and_zero():
    rng = substream(20, "vec")
    policy = DacPolicy(rng.standard_normal((3, 2, 2)))
    back = devectorize(vectorize(policy), 3, 2, 2)
    np.testing.assert_array_equal(back.blocks, policy.blocks)
    np.testing.assert_array_equal(vectorize(DacPolicy.zeros(2, 2, 3)), np.zeros(12))
    with pytest.raises(ValueError):
        devectorize(np.zeros(5), 2, 2, 2)


def test_policy_class_radii():
    pc = PolicyClass.from_stability(kappa=1.0, gamma=0.5, kappa_B=1.0, H=3, d_u=1, d_x=1)
    np.testing.assert_allclose(pc.radii, [0.5, 0.25, 0.125])
    with pytest.raises(ValueError):
        PolicyClass(2, 1, 1, np.array([0.1, 0.2]))


def test_project_euclidean_feasible_unchanged():
    pc = _pclass([0.5, 0.25])
    policy = DacPolicy(np.array([[[0.4]], [[-0.2]]]))
    np.testing.assert_array_equal(project_euclidean(policy, pc).blocks, policy.blocks)


def test_project_euclidean_scalar_clip():
    pc = _pclass([0.5])
    out = project_euclidean(DacPolicy(np.array([[[5.0]]])), pc)
    assert out.blocks[0, 0, 0] == pytest.approx(0.5)


def test_project_spectral_ball_diagonal():
    out = project_spectral_ball(np.diag([3.0, 0.1]), 1.0)
    np.testing.assert_allclose(out, np.diag([1.0, 0.1]), atol=1e-12)


def test_projection_optimality_against_random_feasible():
    rng = substream(21, "proj")
    pc = PolicyClass(2, 2, 2, np.array([0.6, 0.3]))
    for _ in range(20):
        raw = DacPolicy(rng.standard_normal((2, 2, 2)) * 2.0)
        proj = project_euclidean(raw, pc)
        assert pc.contains(proj)
        base = np.linalg.norm(vectorize(proj) - vectorize(raw))
        for _ in range(5):
            feas = DacPolicy(
                np.stack([project_spectral_ball(rng.standard_normal((2, 2)), r) for r in pc.radii])
            )
            assert base <= np.linalg.norm(vectorize(feas) - vectorize(raw)) + 1e-12


def test_projection_idempotent_and_nonexpansive():
    rng = substream(22, "nonexp")
    pc = PolicyClass(2, 2, 2, np.array([0.6, 0.3]))
    pols = [DacPolicy(rng.standard_normal((2, 2, 2)) * 1.5) for _ in range(8)]
    projs = [project_euclidean(p, pc) for p in pols]
    for p in projs:
        np.testing.assert_allclose(
            vectorize(project_euclidean(p, pc)), vectorize(p), atol=1e-12
        )
    for i in range(len(pols)):
        for j in range(i):
            before = np.linalg.norm(vectorize(pols[i]) - vectorize(pols[j]))
            after = np.linalg.norm(vectorize(projs[i]) - vectorize(projs[j]))
            assert after <= before + 1e-12


def test_project_weighted_identity_matches_euclidean():
    rng = substream(23, "weq")
    pc = PolicyClass(2, 1, 2, np.array([0.5, 0.25]))
    for _ in range(10):
        raw = DacPolicy(rng.standard_normal((2, 1, 2)) * 1.5)
        w = project_weighted(raw, pc, np.eye(pc.dim))
        e = project_euclidean(raw, pc)
        assert np.linalg.norm(vectorize(w) - vectorize(e)) <= 1e-9


def test_project_weighted_feasible_unchanged_and_separable():
    pc = _pclass([0.5, 0.25])
    p_metric = np.diag([4.0, 1.0])
    feasible = DacPolicy(np.array([[[0.3]], [[0.1]]]))
    np.testing.assert_allclose(
        vectorize(project_weighted(feasible, pc, p_metric)), vectorize(feasible), atol=1e-12
    )
    out = project_weighted(DacPolicy(np.array([[[1.0]], [[1.0]]])), pc, p_metric)
    np.testing.assert_allclose(vectorize(out), [0.5, 0.25], atol=1e-9)


def test_project_weighted_p_norm_optimality():
    rng = substream(24, "wopt")
    pc = PolicyClass(2, 1, 1, np.array([0.5, 0.25]))
    m = rng.standard_normal((2, 2))
    p_metric = m.T @ m + 0.5 * np.eye(2)

    def pnorm(v):
        return float(v @ p_metric @ v)

    for _ in range(10):
        raw = DacPolicy(rng.standard_normal((2, 1, 1)) * 2.0)
        proj = project_weighted(raw, pc, p_metric)
        assert pc.contains(proj)
        base = pnorm(vectorize(proj) - vectorize(raw))
        for _ in range(20):
            feas = np.array([rng.uniform(-r, r) for r in pc.radii])
            assert base <= pnorm(feas - vectorize(raw)) + 1e-8


def test_project_weighted_rejects_indefinite_metric():
    pc = _pclass([0.5, 0.25])
    with pytest.raises(ValueError):
        project_weighted(DacPolicy.zeros(2, 1, 1), pc, np.diag([1.0, -1.0]))


def test_linear_to_dac_identical_gains_zero():
    sys1 = LinearSystem([[0.9]], [[1.0]])
    policy = linear_to_dac([[0.4]], [[0.4]], sys1, 4)
    np.testing.assert_array_equal(policy.blocks, np.zeros((4, 1, 1)))


def test_linear_to_dac_scalar_blocks():
    sys1 = LinearSystem([[0.9]], [[1.0]])
    policy = linear_to_dac([[0.0]], [[0.4]], sys1, 5)
    expected = np.array([-0.4 * 0.5**i for i in range(5)])
    np.testing.assert_allclose(policy.blocks[:, 0, 0], expected, atol=1e-14)


def test_linear_to_dac_replays_linear_policy():
    # dual-rollout oracle: the replay gap shrinks like (1 - gamma)^H
    a = np.diag([0.9, 0.8])
    sys2 = LinearSystem(a, np.eye(2))
    k_fixed = a - 0.4 * np.eye(2)
    k_star = a - np.diag([0.5, 0.3])
    certify(sys2, k_star)
    H = 20
    policy = linear_to_dac(k_fixed, k_star, sys2, H)
    model = NoiseModel.sphere_uniform(2, 1.0)
    noise = model.sample(substream(25, "replay"), 200)
    costs = lambda s: QuadraticCost.spherical(1.0, 2, 2)
    t_dac = rollout(sys2, DacController(policy, k_fixed), noise, costs)
    t_lin = rollout(sys2, LinearController(k_star), noise, costs)
    gap = np.max(np.linalg.norm(t_dac.states - t_lin.states, axis=1))
    assert gap <= 1e-4 * model.W


def test_disturbance_ring_order_and_padding():
    ring = DisturbanceRing(3, 1)
    np.testing.assert_array_equal(ring.recent(), np.zeros((3, 1)))
    for v in (1.0, 2.0, 3.0):
        ring.push(np.array([v]))
    np.testing.assert_array_equal(ring.recent().ravel(), [3.0, 2.0, 1.0])
    ring.push(np.array([4.0]))
    np.testing.assert_array_equal(ring.recent().ravel(), [4.0, 3.0, 2.0])


def test_policy_json_round_trip():
    rng = substream(26, "json")
    policy = DacPolicy(rng.standard_normal((2, 2, 3)))
    back = DacPolicy.from_json(policy.to_json())
    np.testing.assert_array_equal(back.blocks, policy.blocks)
