"""Independent numerical verifiers for the model's analytical guarantees.

Everything here is deliberately brute-force and self-contained: Katz
centrality by explicit series summation (cross-checked against a dense
linear solve), the structural-loss bound, aggregation SNR before/after
refinement, the temporal-bias gradient, and the Euler attention-ratio
construction. None of it shares code with the model beyond the scalar
kernel helpers, so agreement is meaningful evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import gaussian_kernel, grad_mu_closed_form
from .numcore import Parameter, Tensor, backward


class ConvergenceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Katz centrality and the structural-loss bound
# ---------------------------------------------------------------------------


@dataclass
class KatzParams:
    lam: float | None = None   # explicit attenuation; None -> c / rho(A)
    c: float = 0.1
    tol: float = 1e-12
    max_k: int = 200


def spectral_radius(adjacency: np.ndarray, iters: int = 200,
                    tol: float = 1e-10) -> float:
    """Power iteration estimate of rho(A) for symmetric A.

    Iterates on A^2 so graphs whose extreme eigenvalues come in a +/-
    pair (bipartite graphs) cannot trap the iteration in a period-2
    oscillation.
    """
    A = np.asarray(adjacency, dtype=np.float64)
    n = A.shape[0]
    if n == 0 or not A.any():
        return 0.0
    x = np.full(n, 1.0 / math.sqrt(n))
    prev = 0.0
    est = 0.0
    for _ in range(iters):
        y = A @ (A @ x)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        est = float(np.linalg.norm(A @ x))
        if abs(est - prev) < tol:
            break
        prev = est
    return est


def resolve_lambda(adjacency: np.ndarray, params: KatzParams) -> float:
    if params.lam is not None:
        lam = params.lam
    else:
        rho = spectral_radius(adjacency)
        lam = params.c / rho if rho > 0 else params.c
    rho = spectral_radius(adjacency)
    if lam * rho >= 1.0:
        raise ConvergenceError(f"lambda * rho(A) = {lam * rho:.6f} >= 1")
    return lam


def _series_terms(adjacency: np.ndarray, lam: float, tol: float, max_k: int):
    """Yield (k, (lam*A)^k @ 1) for k = 1.. until the increment is tiny."""
    A = lam * np.asarray(adjacency, dtype=np.float64)
    term = np.ones(A.shape[0])
    for k in range(1, max_k + 1):
        term = A @ term
        yield k, term
        if np.linalg.norm(term) < tol:
            return


def katz_centrality(adjacency: np.ndarray, params: KatzParams) -> np.ndarray:
    """Walk-counting centrality sum_{k>=1} (lam A)^k 1 by truncated series."""
    lam = resolve_lambda(adjacency, params)
    total = np.zeros(np.asarray(adjacency).shape[0])
    for _, term in _series_terms(adjacency, lam, params.tol, params.max_k):
        total += term
    return total


def katz_linear_solve(adjacency: np.ndarray, lam: float) -> np.ndarray:
    """Closed form (I - lam A)^{-1} 1 - 1; the second, independent route."""
    A = np.asarray(adjacency, dtype=np.float64)
    n = A.shape[0]
    return np.linalg.solve(np.eye(n) - lam * A, np.ones(n)) - 1.0


def structural_loss_ratio(adjacency: np.ndarray, params: KatzParams) -> float:
    """||sum_{k>=3} (lam A)^k 1||_2 / ||C||_2 via explicit series split."""
    lam = resolve_lambda(adjacency, params)
    total = np.zeros(np.asarray(adjacency).shape[0])
    tail = np.zeros_like(total)
    for k, term in _series_terms(adjacency, lam, params.tol, params.max_k):
        total += term
        if k >= 3:
            tail += term
    denom = np.linalg.norm(total)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(tail) / denom)


def hop_sensitivity(adjacency: np.ndarray, seed: int, removed_node: int,
                    params: KatzParams) -> float:
    """|Katz(seed) - Katz(seed with removed_node deleted)|.

    The attenuation is resolved on the full graph and reused on the
    reduced one so the comparison isolates the structural change.
    """
    if removed_node == seed:
        raise ValueError("cannot remove the seed itself")
    A = np.asarray(adjacency, dtype=np.float64)
    lam = resolve_lambda(A, params)
    fixed = KatzParams(lam=lam, tol=params.tol, max_k=params.max_k)
    full = katz_centrality(A, fixed)[seed]
    keep = [i for i in range(A.shape[0]) if i != removed_node]
    sub = A[np.ix_(keep, keep)]
    reduced = katz_centrality(sub, fixed)[keep.index(seed)]
    return float(abs(full - reduced))


# ---------------------------------------------------------------------------
# aggregation SNR
# ---------------------------------------------------------------------------


def snr(weights, relevances, sigma_noise: float, h_norm: float) -> float:
    """(||h_v||^2 / sigma_noise^2) * (sum w mu)^2 / sum w^2."""
    if sigma_noise <= 0:
        raise ValueError("sigma_noise must be positive")
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(relevances, dtype=np.float64)
    return float((h_norm**2 / sigma_noise**2) * (w @ mu) ** 2 / (w @ w))


LOW_RELEVANCE = 0.05


def verify_snr_refinement(trials: int = 100,
                          rng: np.random.Generator | None = None) -> dict:
    """Dropping low-relevance neighbors (weights kept) must raise the SNR."""
    rng = rng or np.random.default_rng(0)
    passed = 0
    done = 0
    worst = math.inf
    while done < trials:
        n = int(rng.integers(3, 9))
        w = rng.uniform(0.1, 1.0, size=n)
        n_low = int(rng.integers(1, n))  # guarantee a nonempty noise subset
        mu = np.concatenate([rng.uniform(0.5, 1.0, size=n - n_low),
                             rng.uniform(0.0, LOW_RELEVANCE, size=n_low)])
        keep = mu > LOW_RELEVANCE
        if not keep.any():
            continue  # vacuous neighborhood, skip
        before = snr(w, mu, 1.0, 1.0)
        after = snr(w[keep], mu[keep], 1.0, 1.0)
        done += 1
        margin = after - before
        worst = min(worst, margin)
        if margin > 0:
            passed += 1
    return {"check": "snr_refinement", "trials": done,
            "passed": passed == done, "worst_margin": worst}


# ---------------------------------------------------------------------------
# temporal-bias gradient
# ---------------------------------------------------------------------------


def _autodiff_grad_mu(delta_t: float, mu: float, sigma: float) -> float:
    mu_p = Parameter(np.array(float(mu)), "mu")
    z = (Tensor(np.array(float(delta_t))) - mu_p) * (1.0 / sigma)
    kernel = (z * z * -0.5).exp()
    backward(kernel)
    return float(mu_p.grad)


def _central_diff_grad_mu(kernel_fn, delta_t: float, mu: float, sigma: float,
                          h: float | None = None) -> float:
    h = h if h is not None else max(1e-6, abs(mu) * 1e-6)
    return (kernel_fn(delta_t, mu + h, sigma) - kernel_fn(delta_t, mu - h, sigma)) / (2 * h)


def ascend_mu(delta_t: float, sigma: float, mu0: float, steps: int = 200,
              lr: float | None = None) -> list[float]:
    """Adam-normalized gradient ascent on the kernel; returns the mu trace.

    The raw gradient underflows far from delta_t (the kernel is tiny), so a
    plain fixed-step ascent stalls; normalizing by the running second moment
    makes each move about lr regardless of gradient magnitude.
    """
    lr = lr if lr is not None else sigma / 20.0
    mu = float(mu0)
    m = v = 0.0
    b1, b2, eps = 0.9, 0.999, 1e-12
    trace = [mu]
    for t in range(1, steps + 1):
        g = grad_mu_closed_form(delta_t, mu, sigma)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        mu += lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(mu)
    return trace


def verify_mu_gradient(samples: int = 1000,
                       rng: np.random.Generator | None = None,
                       kernel_fn=gaussian_kernel) -> dict:
    """Three-way gradient agreement plus a recovery-by-ascent check.

    ``kernel_fn`` is injectable so a deliberately wrong kernel can be shown
    to fail (its finite differences then disagree with the closed form).
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    ok = True
    for _ in range(samples):
        dt = float(rng.uniform(0.0, 30.0))
        sigma = float(rng.uniform(0.5, 10.0))
        mu = float(dt + rng.uniform(-2.0, 2.0) * sigma)
        closed = grad_mu_closed_form(dt, mu, sigma)
        auto = _autodiff_grad_mu(dt, mu, sigma)
        numeric = _central_diff_grad_mu(kernel_fn, dt, mu, sigma)
        denom = max(abs(closed), 1e-12)
        rel_auto = abs(auto - closed) / denom
        rel_num = abs(numeric - closed) / denom
        worst = max(worst, rel_auto, rel_num / 1e3)  # scale to the 1e-8 budget
        if rel_auto > 1e-8 or rel_num > 1e-5:
            ok = False
        if abs(dt - mu) > 1e-9 and math.copysign(1.0, closed) != math.copysign(1.0, dt - mu):
            ok = False
    # restoring-force check: ascent from 5 sigma below recovers delta_t
    for _ in range(20):
        dt = float(rng.uniform(5.0, 30.0))
        sigma = float(rng.uniform(0.5, 5.0))
        trace = ascend_mu(dt, sigma, dt - 5 * sigma)
        if abs(trace[-1] - dt) > sigma / 10.0:
            ok = False
    return {"check": "mu_gradient", "trials": samples, "passed": ok,
            "worst_margin": worst}


# ---------------------------------------------------------------------------
# Euler attention ratio
# ---------------------------------------------------------------------------


def _softmax_pair(a: float, b: float) -> tuple[float, float]:
    m = max(a, b)
    ea, eb = math.exp(a - m), math.exp(b - m)
    s = ea + eb
    return ea / s, eb / s


def euler_ratio_factor(content_logit: float, kernel_rel: float = 1.0,
                       kernel_noise: float = 0.0) -> float:
    """(alpha_rel/alpha_noise) with bias over the same ratio without it."""
    a_rel, a_noise = _softmax_pair(content_logit + kernel_rel,
                                   content_logit + kernel_noise)
    b_rel, b_noise = _softmax_pair(content_logit, content_logit)
    return (a_rel / a_noise) / (b_rel / b_noise)


def verify_euler_ratio(trials: int = 20,
                       rng: np.random.Generator | None = None) -> dict:
    """Two-node limit: a unit kernel gap multiplies the odds by exactly e."""
    rng = rng or np.random.default_rng(0)
    kernel_noise = math.exp(-5000)  # underflows to exactly 0.0
    worst = 0.0
    ok = True
    for i in range(trials):
        c = 0.0 if i == 0 else float(rng.uniform(-5.0, 5.0))
        factor = euler_ratio_factor(c, 1.0, kernel_noise)
        err = abs(factor - math.e)
        worst = max(worst, err)
        if err > 1e-6:
            ok = False
        if euler_ratio_factor(c, 0.0, 0.0) != 1.0:  # zero bias: no effect
            ok = False
    return {"check": "euler_ratio", "trials": trials, "passed": ok,
            "worst_margin": worst}


# ---------------------------------------------------------------------------
# random-graph checks and the full suite
# ---------------------------------------------------------------------------


def random_er_adjacency(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    upper = rng.random((n, n)) < p
    A = np.triu(upper, k=1).astype(np.float64)
    return A + A.T


def verify_katz_consistency(trials: int = 50,
                            rng: np.random.Generator | None = None) -> dict:
    rng = rng or np.random.default_rng(1)
    params = KatzParams(c=0.1)
    worst = 0.0
    for _ in range(trials):
        A = random_er_adjacency(100, 0.05, rng)
        lam = resolve_lambda(A, params)
        series = katz_centrality(A, params)
        solved = katz_linear_solve(A, lam)
        worst = max(worst, float(np.max(np.abs(series - solved))))
    return {"check": "katz_consistency", "trials": trials,
            "passed": worst <= 1e-9, "worst_margin": worst}


def verify_structural_bound(trials: int = 50,
                            rng: np.random.Generator | None = None) -> dict:
    rng = rng or np.random.default_rng(2)
    params = KatzParams(c=0.1)
    worst = 0.0
    for _ in range(trials):
        A = random_er_adjacency(100, 0.05, rng)
        worst = max(worst, structural_loss_ratio(A, params))
    bound = params.c**2 + 1e-12
    return {"check": "structural_bound", "trials": trials,
            "passed": worst <= bound, "worst_margin": worst}


ALL_CHECKS = {
    "katz": verify_katz_consistency,
    "structural": verify_structural_bound,
    "snr": verify_snr_refinement,
    "mu_gradient": verify_mu_gradient,
    "euler": verify_euler_ratio,
}


def run_suite(only: list[str] | None = None) -> list[dict]:
    names = only if only else list(ALL_CHECKS)
    unknown = [n for n in names if n not in ALL_CHECKS]
    if unknown:
        raise KeyError(f"unknown checks: {unknown}")
    return [ALL_CHECKS[n]() for n in names]
