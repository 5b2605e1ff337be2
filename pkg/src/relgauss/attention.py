"""Multi-head self-attention with an additive Gaussian temporal bias.

The attention graph is complete over the sampled nodes. Each head owns a
learnable temporal center mu and width sigma (softplus-parameterized with a
floor) plus an affine scalar map applied to the kernel value; the resulting
bias is added to the scaled content scores before the softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import SECONDS_PER_DAY, Affine
from .numcore import Parameter, Tensor

SIGMA_MIN_DAYS = 1e-3

# pairwise deltas involving a node without a timestamp: far outside any
# plausible window, so the kernel underflows to 0 for mixed pairs
INVALID_DELTA_DAYS = 1e12


def softplus_float(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def inverse_softplus(y: float) -> float:
    """rho such that softplus(rho) = y (y > 0)."""
    return float(y + math.log(-math.expm1(-y))) if y > 1e-8 else math.log(math.expm1(y))


def gaussian_kernel(delta_t: float, mu: float, sigma: float) -> float:
    """exp(-(dt-mu)^2 / (2 sigma^2)), the peak-1 temporal kernel."""
    if sigma < SIGMA_MIN_DAYS:
        raise ValueError(f"sigma must be >= {SIGMA_MIN_DAYS}")
    z = (delta_t - mu) / sigma
    return math.exp(-0.5 * z * z)


def grad_mu_closed_form(delta_t: float, mu: float, sigma: float) -> float:
    """d kernel / d mu = kernel * (dt - mu) / sigma^2 (restoring force)."""
    if sigma < SIGMA_MIN_DAYS:
        raise ValueError(f"sigma must be >= {SIGMA_MIN_DAYS}")
    return gaussian_kernel(delta_t, mu, sigma) * (delta_t - mu) / sigma**2


class GaussianBiasParams:
    """Per-head (mu, sigma, affine) of the temporal bias, all in days."""

    def __init__(self, name: str, n_heads: int, mu_init_days: float = 0.0,
                 sigma_init_days: float = 10.0):
        rho0 = inverse_softplus(sigma_init_days - SIGMA_MIN_DAYS)
        self.mu = Parameter(np.full(n_heads, mu_init_days), f"{name}.mu")
        self.rho = Parameter(np.full(n_heads, rho0), f"{name}.rho")
        # identity init: bias equals the raw kernel value
        self.proj_scale = Parameter(np.ones(n_heads), f"{name}.proj_scale")
        self.proj_shift = Parameter(np.zeros(n_heads), f"{name}.proj_shift")

    def sigma_tensor(self, head: int) -> Tensor:
        return nc.softplus(nc.element(self.rho, head)) + SIGMA_MIN_DAYS

    def sigma_values(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data) + SIGMA_MIN_DAYS

    def parameters(self):
        return [self.mu, self.rho, self.proj_scale, self.proj_shift]


def pairwise_delta_days(delta_t_seconds: np.ndarray) -> np.ndarray:
    """|t_i - t_j| in days from seed-relative deltas; symmetric by design."""
    days = np.asarray(delta_t_seconds, dtype=np.float64) / SECONDS_PER_DAY
    finite = np.isfinite(days)
    safe = np.where(finite, days, 0.0)
    d = np.abs(safe[:, None] - safe[None, :])
    bad = ~finite[:, None] | ~finite[None, :]
    d[bad] = INVALID_DELTA_DAYS
    return d


def bias_matrix(delta_t_seconds: np.ndarray, params: GaussianBiasParams,
                head: int) -> Tensor:
    """N x N additive bias for one head: affine(kernel(|dt_i - dt_j|))."""
    return nc.gaussian_bias(pairwise_delta_days(delta_t_seconds), params.mu,
                            params.rho, params.proj_scale, params.proj_shift,
                            head, SIGMA_MIN_DAYS)


class AttentionLayer:
    def __init__(self, name: str, d: int, n_heads: int, rng: np.random.Generator,
                 dropout_rate: float = 0.3):
        if d % n_heads:
            raise ValueError("d must be divisible by n_heads")
        self.d = d
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.dropout_rate = dropout_rate
        self.W_Q = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)), f"{name}.W_Q")
        self.W_K = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)), f"{name}.W_K")
        self.W_V = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)), f"{name}.W_V")
        self.out = Affine(f"{name}.out", d, d, rng)
        self.bias = GaussianBiasParams(f"{name}.bias", n_heads)

    def attend(self, H: Tensor, delta_t_seconds: np.ndarray, *,
               use_bias: bool = True, training: bool = False,
               rng: np.random.Generator | None = None,
               return_weights: bool = False,
               mask: np.ndarray | None = None):
        """Biased multi-head attention over the complete sampled graph.

        ``mask`` is an optional additive pre-softmax matrix (0 where
        attention is allowed, a large negative value where it is not); it
        lets several independent subgraphs share one forward pass.
        """
        n = H.shape[0]
        Q = nc.matmul(H, self.W_Q.t())
        K = nc.matmul(H, self.W_K.t())
        V = nc.matmul(H, self.W_V.t())
        scale = 1.0 / math.sqrt(self.head_dim)
        # the pairwise |dt_i - dt_j| matrix is shared by all heads
        dmat = pairwise_delta_days(delta_t_seconds) if use_bias else None
        head_outs = []
        weights = []
        for h in range(self.n_heads):
            sl = slice(h * self.head_dim, (h + 1) * self.head_dim)
            Qh = nc.col_slice(Q, sl)
            Kh = nc.col_slice(K, sl)
            Vh = nc.col_slice(V, sl)
            scores = nc.matmul(Qh, Kh.t()) * scale
            if use_bias:
                scores = scores + nc.gaussian_bias(
                    dmat, self.bias.mu, self.bias.rho, self.bias.proj_scale,
                    self.bias.proj_shift, h, SIGMA_MIN_DAYS)
            if mask is not None:
                scores = scores + Tensor(mask)
            alpha = nc.softmax_rows(scores)
            if return_weights:
                weights.append(alpha.data.copy())
            if training and self.dropout_rate > 0 and rng is not None:
                alpha = nc.dropout(alpha, self.dropout_rate, rng, training)
            head_outs.append(nc.matmul(alpha, Vh))
        out = self.out(nc.concat(head_outs, axis=1))
        if return_weights:
            return out, weights
        return out

    def parameters(self):
        return ([self.W_Q, self.W_K, self.W_V] + self.out.parameters()
                + self.bias.parameters())
