"""Split R-hat and effective sample size for scalar MCMC traces.

Both follow the rank-free formulation used by Stan: chains are split in
half, and ESS uses Geyer's initial monotone sequence on the
multi-chain autocorrelation estimate.
"""
from __future__ import annotations

import numpy as np


def _split(chains: np.ndarray) -> np.ndarray:
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("expected a (num_chains, num_draws) array")
    n = chains.shape[1] // 2
    if n < 2:
        raise ValueError(f"need at least 4 draws per chain, got {chains.shape[1]}")
    return np.concatenate((chains[:, :n], chains[:, -n:]), axis=0)


def is_degenerate(chains: np.ndarray) -> bool:
    chains = np.asarray(chains, dtype=float)
    return bool(np.all(chains == chains.flat[0]))


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction on split chains; ``nan`` for a constant trace."""
    x = _split(chains)
    if is_degenerate(x):
        return float("nan")
    m, n = x.shape
    means = x.mean(axis=1)
    within = x.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    if within == 0.0:
        return float("inf")
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / n


def effective_sample_size(chains: np.ndarray) -> float:
    """Multi-chain ESS; ``nan`` for a constant trace."""
    x = _split(chains)
    if is_degenerate(x):
        return float("nan")
    m, n = x.shape
    acov = np.array([_autocovariance(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus == 0.0:
        return float("nan")
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    # Geyer: sum consecutive pairs while positive, enforcing monotonicity.
    total = 0.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = max(-1.0 + 2.0 * total, 1.0 / np.log10(m * n))
    return float(m * n / tau)
