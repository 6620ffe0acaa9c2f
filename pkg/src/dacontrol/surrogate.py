"""Transfer matrices, surrogate state/action, the action Jacobian, and its exact
second moment.

Conventions, fixed package-wide:

* A window holds exactly 2H disturbance draws ``w_0..w_{2H-1}`` (row ``2H-1``
  is the newest).
* ``vtilde_k(M) = sum_{i=1..H} M^[i-1] w_{2H-i-k}`` for k = 0..H.
* The surrogate state is ``y = sum_{i=0..H} Atilde^i w_{2H-1-i}  +
  sum_{k=1..H} Atilde^{k-1} B vtilde_k(.)`` and the surrogate action
  ``v = -K y + vtilde_0(.)``; with stationary arguments this is the state and
  action a 2H-step rollout of the policy reaches, up to terms of order
  |Atilde|^{H+1}.
* Stacking z = (y; v), the map M -> z is affine with a policy-independent
  intercept, z(M) = J vec(M) + z(0), where vec stacks the rows of each block
  and the blocks in ascending order. The Jacobian decomposes through
  ``J_{vtilde_k} = [I ⊗ w_{2H-k-1}ᵀ ... I ⊗ w_{H-k}ᵀ]`` as
  ``J_y = sum_k Atilde^{k-1} B J_{vtilde_k}`` and
  ``J_v = -K J_y + J_{vtilde_0}``.
* For i.i.d. zero-mean draws with second moment Sigma,
  ``E[J_{vtilde_k1}ᵀ P J_{vtilde_k2}] = T_{k2-k1} ⊗ P ⊗ Sigma`` with
  ``[T_m]_{ij} = 1`` iff ``i - j = m``, which makes E[JᵀJ] (and every
  E[J_yᵀ Q J_y + J_vᵀ R J_v]) an exactly computable Toeplitz-of-Kronecker sum.
"""
from __future__ import annotations

import struct
from typing import Optional, Sequence

import numpy as np

from .lds import LinearSystem, NoiseModel, QuadraticCost, as_matrix
from .policy import DacPolicy, vectorize
from .rng import substream

GRAM_MAGIC = b"PGRM"


def matrix_powers(a: np.ndarray, top: int) -> list[np.ndarray]:
    """[I, A, ..., A^top]."""
    pows = [np.eye(a.shape[0])]
    for _ in range(top):
        pows.append(pows[-1] @ a)
    return pows


def transfer_prefactors(a_tilde: np.ndarray, b_mat: np.ndarray, H: int) -> np.ndarray:
    """Stack of C_k = Atilde^{k-1} B for k = 1..H, shape (H, d_x, d_u)."""
    pows = matrix_powers(a_tilde, H - 1)
    return np.stack([pows[k] @ b_mat for k in range(H)])


def toeplitz_indicator(m: int, H: int) -> np.ndarray:
    """The H x H matrix with ones exactly where (row - column) equals m."""
    return np.eye(H, k=-m)


# ---------------------------------------------------------------------------
# Disturbance-state transfer matrices


def psi_nonstationary(
    policies: Sequence[DacPolicy],
    i: int,
    h: int,
    a_tilde: np.ndarray,
    b_mat: np.ndarray,
    H: int,
    pows: Optional[list[np.ndarray]] = None,
) -> np.ndarray:
    """Coefficient of the disturbance aged ``i`` steps under the last h+1 policies.

    ``policies`` is ordered oldest first, so ``policies[-1]`` acts most
    recently. Equals Atilde^i for i <= h plus
    sum_{j=0..h} Atilde^j B M_{latest-j}^[i-j-1] over j with i-j in [1, H].
    """
    if not 0 <= i <= H + h:
        raise ValueError(f"disturbance age i={i} outside [0, {H + h}]")
    if len(policies) != h + 1:
        raise ValueError(f"need h+1={h + 1} policies, got {len(policies)}")
    if pows is None:
        pows = matrix_powers(a_tilde, max(i, h))
    d_x = a_tilde.shape[0]
    out = pows[i].copy() if i <= h else np.zeros((d_x, d_x))
    for j in range(h + 1):
        if 1 <= i - j <= H:
            out += pows[j] @ b_mat @ policies[h - j].blocks[i - j - 1]
    return out


def psi(policies: Sequence[DacPolicy], i: int, a_tilde: np.ndarray, b_mat: np.ndarray) -> np.ndarray:
    """Stationary-window transfer matrix: h = H with the policy horizon as window."""
    H = len(policies) - 1
    return psi_nonstationary(policies, i, H, a_tilde, b_mat, H)


# ---------------------------------------------------------------------------
# Surrogate state and action


def _check_window(window: np.ndarray, d_x: int) -> int:
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[0] % 2 != 0 or window.shape[1] != d_x:
        raise ValueError(f"window must have shape (2H, {d_x}), got {window.shape}")
    return window.shape[0] // 2


def sample_window(model: NoiseModel, H: int, rng: np.random.Generator) -> np.ndarray:
    return model.sample(rng, 2 * H)


def _vtilde(blocks: np.ndarray, window: np.ndarray, k: int) -> np.ndarray:
    """sum_i M^[i-1] w_{2H-i-k}; ``blocks`` indexed newest-disturbance-first."""
    H = blocks.shape[0]
    rows = window[2 * H - H - k : 2 * H - k][::-1]
    return np.einsum("iuz,iz->u", blocks, rows)


def surrogate_intercept(window: np.ndarray, a_tilde: np.ndarray, k_fixed: np.ndarray) -> np.ndarray:
    """The policy-independent part z(0) = (y0; -K y0)."""
    H = _check_window(window, a_tilde.shape[0])
    pows = matrix_powers(a_tilde, H)
    y0 = np.zeros(a_tilde.shape[0])
    for i in range(H + 1):
        y0 += pows[i] @ window[2 * H - 1 - i]
    return np.concatenate([y0, -np.asarray(k_fixed) @ y0])


def surrogate_pair(
    policies: Sequence[DacPolicy],
    window: np.ndarray,
    k_fixed: np.ndarray,
    a_tilde: np.ndarray,
    b_mat: np.ndarray,
):
    """Surrogate state/action for H+2 policies (oldest first) on a 2H window.

    The last argument supplies the action's direct disturbance response; the
    middle H feed the state through the closed loop. The leading argument only
    pads the signature: its contribution is the boundary term a 2H window
    cannot carry, and dropping it is what makes z(M) - z(0) = J vec(M) exact.
    """
    H = _check_window(window, a_tilde.shape[0])
    if len(policies) != H + 2:
        raise ValueError(f"need H+2={H + 2} policies, got {len(policies)}")
    for p in policies:
        if p.H != H or p.d_x != a_tilde.shape[0] or p.d_u != b_mat.shape[1]:
            raise ValueError("policy shape does not match the window and system")
    window = np.asarray(window, dtype=float)
    prefac = transfer_prefactors(a_tilde, b_mat, H)
    z0 = surrogate_intercept(window, a_tilde, k_fixed)
    d_x = a_tilde.shape[0]
    y = z0[:d_x].copy()
    for k in range(1, H + 1):
        y += prefac[k - 1] @ _vtilde(policies[H - k + 1].blocks, window, k)
    v = -np.asarray(k_fixed) @ y + _vtilde(policies[H + 1].blocks, window, 0)
    return y, v


# ---------------------------------------------------------------------------
# Jacobian of the surrogate pair with respect to the policy


def batched_jacobian(
    windows: np.ndarray, a_tilde: np.ndarray, b_mat: np.ndarray, k_fixed: np.ndarray
) -> np.ndarray:
    """Jacobians for a batch of windows, shape (n_win, d_x + d_u, H d_u d_x)."""
    windows = np.asarray(windows, dtype=float)
    H = windows.shape[1] // 2
    d_x = a_tilde.shape[0]
    d_u = b_mat.shape[1]
    c = windows.shape[0]
    prefac = transfer_prefactors(a_tilde, b_mat, H)
    j_y = np.zeros((c, d_x, H, d_u, d_x))
    for blk in range(H):
        for k in range(1, H + 1):
            w = windows[:, 2 * H - 1 - k - blk, :]
            j_y[:, :, blk, :, :] += np.einsum("xu,cz->cxuz", prefac[k - 1], w)
    eye_u = np.eye(d_u)
    j_direct = np.einsum("uv,cbz->cubvz", eye_u, windows[:, 2 * H - 1 : H - 1 : -1, :])
    n = H * d_u * d_x
    j_y = j_y.reshape(c, d_x, n)
    j_direct = j_direct.reshape(c, d_u, n)
    j_v = -np.einsum("ux,cxn->cun", np.asarray(k_fixed, dtype=float), j_y) + j_direct
    return np.concatenate([j_y, j_v], axis=1)


def jacobian(
    window: np.ndarray, sys: LinearSystem, k_fixed: np.ndarray, H: int
) -> np.ndarray:
    """Stacked [J_y; J_v] for one window; z(M) = jacobian @ vec(M) + intercept."""
    if _check_window(window, sys.d_x) != H:
        raise ValueError("window length does not match 2H")
    a_tilde = sys.A - sys.B @ np.asarray(k_fixed, dtype=float)
    return batched_jacobian(np.asarray(window, dtype=float)[None], a_tilde, sys.B, k_fixed)[0]


# ---------------------------------------------------------------------------
# Exact second moments


def gram_bilinear(
    a_tilde: np.ndarray,
    b_mat: np.ndarray,
    k_fixed: np.ndarray,
    H: int,
    Sigma: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
) -> np.ndarray:
    """E[J_yᵀ Q J_y + J_vᵀ R J_v], assembled from the Toeplitz-Kronecker identity."""
    k_fixed = np.asarray(k_fixed, dtype=float)
    d_u = b_mat.shape[1]
    prefac = transfer_prefactors(a_tilde, b_mat, H)
    d_k = np.einsum("ux,kxv->kuv", k_fixed, prefac)
    n = H * d_u * a_tilde.shape[0]
    out = np.zeros((n, n))
    mid_q = np.einsum("kxu,xy,lyv->kluv", prefac, Q, prefac)
    mid_r = np.einsum("kau,ab,lbv->kluv", d_k, R, d_k)
    for m in range(-(H - 1), H):
        mid = np.zeros((d_u, d_u))
        for k1 in range(max(1, 1 - m), min(H, H - m) + 1):
            k2 = k1 + m
            mid += mid_q[k1 - 1, k2 - 1] + mid_r[k1 - 1, k2 - 1]
        out += np.kron(toeplitz_indicator(m, H), np.kron(mid, Sigma))
    for k in range(1, H + 1):
        cross = np.kron(toeplitz_indicator(k, H), np.kron(R @ d_k[k - 1], Sigma))
        out -= cross + cross.T
    out += np.kron(np.eye(H), np.kron(R, Sigma))
    return 0.5 * (out + out.T)


def gram_linear_term(
    a_tilde: np.ndarray,
    b_mat: np.ndarray,
    k_fixed: np.ndarray,
    H: int,
    Sigma: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
) -> np.ndarray:
    """E[J_yᵀ Q y0 + J_vᵀ R v0]: the Jacobian-intercept coupling of a quadratic cost."""
    k_fixed = np.asarray(k_fixed, dtype=float)
    pows = matrix_powers(a_tilde, H)
    prefac = transfer_prefactors(a_tilde, b_mat, H)
    d_x = a_tilde.shape[0]
    d_u = b_mat.shape[1]
    mid = Q + k_fixed.T @ R @ k_fixed
    rk = R @ k_fixed
    out = np.zeros((H, d_u, d_x))
    for blk in range(H):
        acc = -rk @ pows[blk] @ Sigma
        for k in range(1, H - blk + 1):
            acc += prefac[k - 1].T @ mid @ pows[k + blk] @ Sigma
        out[blk] = acc
    return out.reshape(-1)


def gram_constant_term(
    a_tilde: np.ndarray,
    k_fixed: np.ndarray,
    H: int,
    Sigma: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
) -> float:
    """E of the cost's intercept-only part, E[y0ᵀ Q y0 + v0ᵀ R v0]."""
    k_fixed = np.asarray(k_fixed, dtype=float)
    pows = matrix_powers(a_tilde, H)
    mid = Q + k_fixed.T @ R @ k_fixed
    total = 0.0
    for j in range(H + 1):
        total += float(np.trace(pows[j].T @ mid @ pows[j] @ Sigma))
    return total


def expected_gram(sys: LinearSystem, k_fixed, H: int, Sigma: np.ndarray) -> np.ndarray:
    """The exact preconditioner E[JᵀJ] for a certified fixed gain."""
    k_fixed = as_matrix(k_fixed, "k_fixed")
    a_tilde = sys.A - sys.B @ k_fixed
    return gram_bilinear(a_tilde, sys.B, k_fixed, H, np.asarray(Sigma, dtype=float), np.eye(sys.d_x), np.eye(sys.d_u))


def monte_carlo_gram(
    model: "SurrogateModel", n_samples: int, seed: int, chunk: int = 4096
) -> np.ndarray:
    """Seeded sample average of JᵀJ; converges to the closed form at O(n^{-1/2})."""
    rng = substream(seed, "mc_gram", model.H)
    total = np.zeros((model.dim, model.dim))
    done = 0
    while done < n_samples:
        c = min(chunk, n_samples - done)
        windows = model.noise_model.sample(rng, c * 2 * model.H).reshape(c, 2 * model.H, -1)
        j = batched_jacobian(windows, model.a_tilde, model.b_mat, model.k_fixed)
        total += np.einsum("cai,caj->ij", j, j)
        done += c
    return total / n_samples


# ---------------------------------------------------------------------------
# The surrogate model and its cost oracles


class SurrogateModel:
    """Everything the learners need: closed loop, window moments, and E[JᵀJ].

    Immutable after construction; the Gram matrix is assembled once.
    """

    def __init__(
        self,
        sys: LinearSystem,
        k_fixed,
        H: int,
        noise_model: Optional[NoiseModel] = None,
        Sigma: Optional[np.ndarray] = None,
    ):
        if noise_model is None and Sigma is None:
            raise ValueError("need a noise model or an explicit covariance")
        self.sys = sys
        self.k_fixed = as_matrix(k_fixed, "k_fixed")
        self.H = int(H)
        self.noise_model = noise_model
        self.Sigma = np.asarray(noise_model.Sigma if Sigma is None else Sigma, dtype=float)
        self.a_tilde = sys.A - sys.B @ self.k_fixed
        self.b_mat = sys.B
        self.p_gram = gram_bilinear(
            self.a_tilde, self.b_mat, self.k_fixed, self.H, self.Sigma,
            np.eye(sys.d_x), np.eye(sys.d_u),
        )
        self._form_cache: dict[int, tuple] = {}

    @property
    def dim(self) -> int:
        return self.H * self.sys.d_u * self.sys.d_x

    def quadratic_form(self, cost: QuadraticCost):
        """(A_f, b_f, c_f) with f(M) = vᵀ A_f v + 2 b_fᵀ v + c_f at v = vec(M).

        Cost offsets shift only the constant: the Jacobian and intercept are
        zero-mean, so linear offset couplings vanish in expectation. Spherical
        costs scale one cached unit form instead of re-assembling.
        """
        if cost.spherical_scale is not None:
            base = self._form_cache.get("spherical_unit")
            if base is None:
                base = (
                    self.p_gram,
                    gram_linear_term(
                        self.a_tilde, self.b_mat, self.k_fixed, self.H, self.Sigma,
                        np.eye(self.sys.d_x), np.eye(self.sys.d_u),
                    ),
                    gram_constant_term(
                        self.a_tilde, self.k_fixed, self.H, self.Sigma,
                        np.eye(self.sys.d_x), np.eye(self.sys.d_u),
                    ),
                )
                self._form_cache["spherical_unit"] = base
            r = cost.spherical_scale
            return r * base[0], r * base[1], r * base[2]
        key = id(cost)
        hit = self._form_cache.get(key)
        if hit is not None:
            return hit
        a_f = gram_bilinear(self.a_tilde, self.b_mat, self.k_fixed, self.H, self.Sigma, cost.Q, cost.R)
        b_f = gram_linear_term(self.a_tilde, self.b_mat, self.k_fixed, self.H, self.Sigma, cost.Q, cost.R)
        c_f = gram_constant_term(self.a_tilde, self.k_fixed, self.H, self.Sigma, cost.Q, cost.R)
        if cost.x_offset is not None:
            c_f += float(cost.x_offset @ cost.Q @ cost.x_offset)
        if cost.u_offset is not None:
            c_f += float(cost.u_offset @ cost.R @ cost.u_offset)
        form = (a_f, b_f, c_f)
        if len(self._form_cache) < 64:
            self._form_cache[key] = form
        return form


def surrogate_cost_and_grad(
    cost: QuadraticCost,
    policy: DacPolicy,
    model: SurrogateModel,
    mode: str = "closed_form",
    n_samples: int = 2000,
    seed: int = 0,
):
    """Expected stage cost of the surrogate pair and its gradient in vec(M).

    ``closed_form`` evaluates the exact quadratic (quadratic-family costs
    only); ``monte_carlo`` averages over ``n_samples`` seeded windows with the
    same derived seed on every call, so the learner sees a deterministic
    function.
    """
    if mode == "closed_form":
        if not isinstance(cost, QuadraticCost):
            raise TypeError("closed-form evaluation needs a quadratic-family cost")
        a_f, b_f, c_f = model.quadratic_form(cost)
        v = vectorize(policy)
        value = float(v @ a_f @ v + 2.0 * b_f @ v + c_f)
        grad = 2.0 * (a_f @ v + b_f)
        return value, grad
    if mode == "monte_carlo":
        stats = monte_carlo_cost_and_grad(cost, policy, model, n_samples, seed)
        return stats["value"], stats["grad"]
    raise ValueError(f"unknown mode {mode!r}")


def monte_carlo_cost_and_grad(
    cost,
    policy: DacPolicy,
    model: SurrogateModel,
    n_samples: int,
    seed: int,
) -> dict:
    """Sample-average cost/gradient over seeded windows, with standard errors."""
    if model.noise_model is None:
        raise ValueError("Monte-Carlo evaluation needs the model's noise distribution")
    H, d_x, d_u = model.H, model.sys.d_x, model.sys.d_u
    rng = substream(seed, "mc_cost", H)
    windows = model.noise_model.sample(rng, n_samples * 2 * H).reshape(n_samples, 2 * H, d_x)
    pows = matrix_powers(model.a_tilde, H)
    prefac = transfer_prefactors(model.a_tilde, model.b_mat, H)

    y = np.zeros((n_samples, d_x))
    for i in range(H + 1):
        y += windows[:, 2 * H - 1 - i, :] @ pows[i].T
    vt = []
    for k in range(H + 1):
        rows = windows[:, H - k : 2 * H - k, :][:, ::-1, :]
        vt.append(np.einsum("iuz,ciz->cu", policy.blocks, rows))
    for k in range(1, H + 1):
        y += vt[k] @ prefac[k - 1].T
    v = -y @ model.k_fixed.T + vt[0]

    values = cost.value(y, v)
    gy, gu = _batch_cost_grads(cost, y, v)
    q = gy - gu @ model.k_fixed
    grads = np.zeros((n_samples, H, d_u, d_x))
    for blk in range(H):
        acc = np.einsum("cu,cz->cuz", gu, windows[:, 2 * H - 1 - blk, :])
        for k in range(1, H + 1):
            t_k = q @ prefac[k - 1]
            acc += np.einsum("cu,cz->cuz", t_k, windows[:, 2 * H - 1 - k - blk, :])
        grads[:, blk] = acc
    grads = grads.reshape(n_samples, -1)
    return {
        "value": float(values.mean()),
        "value_se": float(values.std(ddof=1) / np.sqrt(n_samples)),
        "grad": grads.mean(axis=0),
        "grad_se": grads.std(axis=0, ddof=1) / np.sqrt(n_samples),
    }


def _batch_cost_grads(cost, y: np.ndarray, v: np.ndarray):
    if isinstance(cost, QuadraticCost):
        yc = y - cost.x_offset if cost.x_offset is not None else y
        vc = v - cost.u_offset if cost.u_offset is not None else v
        return 2.0 * yc @ cost.Q.T, 2.0 * vc @ cost.R.T
    gy = np.zeros_like(y)
    gu = np.zeros_like(v)
    for c in range(y.shape[0]):
        gy[c], gu[c] = cost.grad(y[c], v[c])
    return gy, gu


# ---------------------------------------------------------------------------
# Dense binary export of the Gram matrix


def write_gram(path, matrix: np.ndarray) -> None:
    """Row-major float64 dump with a 16-byte header: magic, rows, cols, pad."""
    m = np.ascontiguousarray(matrix, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(GRAM_MAGIC)
        fh.write(struct.pack("<III", m.shape[0], m.shape[1], 0))
        fh.write(m.tobytes(order="C"))


def read_gram(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GRAM_MAGIC:
            raise ValueError(f"not a gram matrix file (magic {magic!r})")
        rows, cols, _ = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(rows * cols * 8), dtype=np.float64)
    return data.reshape(rows, cols).copy()
