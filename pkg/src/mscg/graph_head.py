"""Self-constructing graph and the two-layer GCN that runs on it.

Shapes carry a leading batch axis throughout: node features are ``b x n x d``,
adjacencies ``b x n x n``. ``n = h' * w'`` nodes are indexed row-major over the
pooled grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm, Conv2d, Module, check_finite
from .numerics import ContractError, RngState, Var, ops
from .numerics.autodiff import as_var

EPS = 1e-5


@dataclass
class GraphBundle:
    a_hat: Var           # b x n x n
    a_prime: Var         # b x n x n
    node_features: Var   # b x n x d
    residual: Var        # b x n x c, the adaptive residual prediction
    mu: Var
    log_sigma: Var
    kl_loss: Var         # scalar, averaged over the batch
    dl_loss: Var         # scalar, averaged over the batch
    gamma: Var           # (b,)


def kl_divergence(mu, log_sigma) -> Var:
    """Gaussian KL against N(0, I): ``-(1/2n) * sum(1 + 2 log s - mu^2 - s^2)``.

    The sum runs over every node and channel but is divided by the node count
    ``n`` only. Leading axes beyond the trailing ``n x c`` are kept.
    """
    mu, log_sigma = as_var(mu), as_var(log_sigma)
    if mu.shape != log_sigma.shape:
        raise ContractError(f"kl_divergence: mu {mu.shape} vs log_sigma {log_sigma.shape}")
    n = mu.shape[-2]
    terms = 1.0 + 2.0 * log_sigma - ops.square(mu) - ops.exp(2.0 * log_sigma)
    return ops.sum(terms, axis=(-2, -1)) * (-0.5 / n)


def diag_gamma(a_prime) -> Var:
    """``sqrt(1 + n / (trace(A') + eps))``; always >= 1."""
    a_prime = as_var(a_prime)
    n = a_prime.shape[-1]
    trace = ops.sum(ops.diagonal(a_prime), axis=-1)
    return ops.sqrt(1.0 + n / (trace + EPS))


def diagonal_loss(a_prime) -> tuple[Var, Var]:
    """Diagonal regulariser and its ``gamma``.

    ``-(gamma / n^2) * sum_i log(clamp(A'_ii, 0, 1) + eps)``
    """
    a_prime = as_var(a_prime)
    n = a_prime.shape[-1]
    gamma = diag_gamma(a_prime)
    diag = ops.clamp(ops.diagonal(a_prime), 0.0, 1.0)
    logs = ops.sum(ops.log(diag + EPS), axis=-1)
    return -(gamma / (n * n)) * logs, gamma


def _per_item(gamma, dtype) -> Var:
    g = as_var(gamma, dtype)
    return g if g.ndim == 0 else ops.reshape(g, g.shape + (1, 1))


def enhance_diagonal(a_prime, gamma) -> Var:
    """``A* = A' + gamma * diag(A')``."""
    a_prime = as_var(a_prime)
    eye = np.eye(a_prime.shape[-1], dtype=a_prime.dtype)
    return a_prime + _per_item(gamma, a_prime.dtype) * (a_prime * eye)


def normalize_adjacency(a_star) -> Var:
    """Symmetric normalisation with self loops, ``D^-1/2 (A* + I) D^-1/2``."""
    a_star = as_var(a_star)
    n = a_star.shape[-1]
    if a_star.shape[-2] != n:
        raise ContractError(f"normalize_adjacency needs a square matrix, got {a_star.shape}")
    a_loop = a_star + np.eye(n, dtype=a_star.dtype)
    inv_sqrt = ops.power(ops.sum(a_loop, axis=-1), -0.5)
    left = ops.reshape(inv_sqrt, inv_sqrt.shape + (1,))
    right = ops.reshape(inv_sqrt, inv_sqrt.shape[:-1] + (1, n))
    return a_loop * left * right


def adaptive_residual(mu, log_sigma, gamma) -> Var:
    """``gamma * mu * (1 - log sigma)``, broadcasting ``gamma`` per batch item."""
    mu = as_var(mu)
    return _per_item(gamma, mu.dtype) * mu * (1.0 - log_sigma)


def build_graph(mu, log_sigma, noise=None, node_features=None) -> GraphBundle:
    """Latent embedding -> adjacency pipeline given ``mu``, ``log_sigma`` (b x n x c).

    ``noise`` is the reparameterisation draw; ``None`` means zero (eval mode).
    """
    mu, log_sigma = as_var(mu), as_var(log_sigma)
    z = mu if noise is None else mu + ops.exp(log_sigma) * noise
    check_finite("latent embedding", z)
    a_prime = ops.relu(ops.matmul(z, ops.swap_last(z)))
    dl, gamma = diagonal_loss(a_prime)
    a_hat = normalize_adjacency(enhance_diagonal(a_prime, gamma))
    check_finite("normalized adjacency", a_hat)
    residual = adaptive_residual(mu, log_sigma, gamma)
    check_finite("adaptive residual", residual)
    kl = kl_divergence(mu, log_sigma)
    check_finite("kl loss", kl)
    check_finite("diagonal loss", dl)
    return GraphBundle(a_hat=a_hat, a_prime=a_prime, node_features=node_features, residual=residual,
                       mu=mu, log_sigma=log_sigma, kl_loss=ops.mean(kl), dl_loss=ops.mean(dl), gamma=gamma)


def grid_to_nodes(x) -> Var:
    """``b x ch x h x w`` -> ``b x (h*w) x ch`` with row-major node order."""
    b, ch, h, w = x.shape
    return ops.transpose(ops.reshape(x, (b, ch, h * w)), (0, 2, 1))


def nodes_to_grid(x, side: int) -> Var:
    """Inverse of :func:`grid_to_nodes` for a square ``side x side`` grid."""
    b, n, ch = x.shape
    if side * side != n:
        raise ContractError(f"{n} nodes do not form a {side}x{side} grid")
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (b, ch, side, side))


class SCG(Module):
    """Latent graph construction from a ``b x d x h x w`` feature map."""

    def __init__(self, in_channels: int, num_classes: int, node_side: int, rng: RngState,
                 kernel: int = 3, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "node_side", node_side)
        self.conv_mu = Conv2d(in_channels, num_classes, kernel, rng.substream("mu"),
                              padding=kernel // 2, dtype=dtype)
        self.conv_logsigma = Conv2d(in_channels, num_classes, kernel, rng.substream("logsigma"),
                                    padding=kernel // 2, dtype=dtype)
        # start at sigma = 1 (the prior); a random start lets mu * (1 - log sigma) run away
        self.conv_logsigma.weight.value[...] = 0

    def __call__(self, x, train: bool, rng: RngState | None = None) -> GraphBundle:
        x = as_var(x)
        s = self.node_side
        if x.shape[-2] < s or x.shape[-1] < s:
            raise ContractError(f"node grid {s}x{s} is larger than the feature map {x.shape[-2:]}")
        pooled = ops.adaptive_avg_pool(x, s, s)
        nodes = grid_to_nodes(pooled)
        mu = grid_to_nodes(self.conv_mu(pooled))
        log_sigma = grid_to_nodes(self.conv_logsigma(pooled))
        check_finite("mu/log_sigma", mu)
        check_finite("mu/log_sigma", log_sigma)
        noise = None
        if train:
            if rng is None:
                raise ValueError("train-mode SCG needs an RngState for the noise draw")
            noise = rng.normal(mu.shape, dtype=mu.dtype)
        return build_graph(mu, log_sigma, noise, node_features=nodes)


def gcn_layer(a_hat, x, theta) -> Var:
    return ops.matmul(a_hat, ops.matmul(x, theta))


class GCN(Module):
    """Two propagation steps; ReLU + batch norm on the first only."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: RngState, dtype=np.float32):
        super().__init__()
        self.add_param("theta_1", _glorot(rng.substream("theta_1"), in_dim, hidden_dim, dtype))
        self.add_param("theta_2", _glorot(rng.substream("theta_2"), hidden_dim, out_dim, dtype))
        self.bn = BatchNorm(hidden_dim, channel_axis=-1, dtype=dtype)

    def __call__(self, a_hat, x_nodes, train: bool) -> Var:
        z1 = self.bn(ops.relu(gcn_layer(a_hat, x_nodes, self.theta_1)), train)
        return gcn_layer(a_hat, z1, self.theta_2)


def _glorot(rng: RngState, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return (rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))).astype(dtype)
