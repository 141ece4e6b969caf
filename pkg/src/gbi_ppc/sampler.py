"""Hamiltonian Monte Carlo for the tempered posterior, plus draw post-processing.

Each chain runs static-length HMC with a leapfrog count drawn uniformly from
``leapfrog_steps`` per iteration. During warmup the step size is tuned by
dual averaging toward ``target_accept`` and a diagonal inverse mass matrix is
estimated over doubling windows; both are frozen afterwards.

RNG streams: chain ``c`` of a run seeded with ``seed`` uses
``numpy.random.SeedSequence(seed, spawn_key=(c,))``, so the number of
chains never changes what an individual chain draws.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diagnostics
from .errors import ConfigError, NumericalError
from .model import Corpus, ModelConfig, ParamState, ProbParams, softmax, value_and_grad_arrays

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class McmcConfig:
    num_draws: int = 1000
    num_warmup: int = 1000
    num_chains: int = 4
    leapfrog_steps: tuple[int, int] = (8, 24)
    target_accept: float = 0.8
    seed: int = 0
    init_sd: float = 0.1
    adapt_mass: bool = True
    max_divergent_fraction: float = 0.05

    def __post_init__(self) -> None:
        steps = self.leapfrog_steps
        if isinstance(steps, (int, np.integer)):
            steps = (int(steps), int(steps))
        object.__setattr__(self, "leapfrog_steps", tuple(int(s) for s in steps))
        lo, hi = self.leapfrog_steps
        if self.num_draws < 1:
            raise ConfigError(f"num_draws must be >= 1, got {self.num_draws}")
        if self.num_warmup < 0:
            raise ConfigError(f"num_warmup must be >= 0, got {self.num_warmup}")
        if self.num_chains < 1:
            raise ConfigError(f"num_chains must be >= 1, got {self.num_chains}")
        if not 1 <= lo <= hi:
            raise ConfigError(f"leapfrog_steps must satisfy 1 <= lo <= hi, got {self.leapfrog_steps}")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError(f"target_accept must lie in (0, 1), got {self.target_accept}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leapfrog_steps"] = list(self.leapfrog_steps)
        return d


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    """Post-warmup draws for one learning rate, chains concatenated.

    Logits are stacked: ``phi`` is (N, G, T, K) and ``psi`` is (N, K, T, V).
    """

    phi: np.ndarray
    psi: np.ndarray
    lam: float
    accept_rate: float
    chain_ids: np.ndarray
    seed: int
    log_post: np.ndarray
    step_sizes: tuple[float, ...] = ()
    num_divergent: int = 0
    warnings: tuple[str, ...] = ()
    relabeled: bool = False

    def __len__(self) -> int:
        return self.phi.shape[0]

    def __getitem__(self, n: int) -> ParamState:
        return ParamState(self.phi[n], self.psi[n])

    @property
    def draws(self) -> list[ParamState]:
        return [self[n] for n in range(len(self))]

    @property
    def num_chains(self) -> int:
        return int(np.unique(self.chain_ids).size)

    def replace(self, **changes) -> "PosteriorDraws":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return PosteriorDraws(**fields)

    @classmethod
    def from_states(cls, states, lam: float, *, chain_ids=None, log_post=None,
                    accept_rate: float = 1.0, seed: int = 0) -> "PosteriorDraws":
        states = list(states)
        n = len(states)
        return cls(
            phi=np.stack([s.phi for s in states]),
            psi=np.stack([s.psi for s in states]),
            lam=float(lam),
            accept_rate=accept_rate,
            chain_ids=np.zeros(n, dtype=int) if chain_ids is None else np.asarray(chain_ids, dtype=int),
            seed=seed,
            log_post=np.zeros(n) if log_post is None else np.asarray(log_post, dtype=float),
        )


@dataclass(frozen=True)
class ConvergenceSummary:
    names: tuple[str, ...]
    ess: tuple[float, ...]
    rhat: tuple[float, ...]
    degenerate: tuple[bool, ...]
    warnings: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict:
        return {name: {"ess": e, "rhat": r, "degenerate": g}
                for name, e, r, g in zip(self.names, self.ess, self.rhat, self.degenerate)}


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chain),)))


def derive_seed(seed: int, *path: int) -> int:
    """Child 64-bit seed for a sub-task identified by ``path``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


class _Target:
    """Flat-vector view of the tempered log-posterior for the integrator."""

    def __init__(self, corpus: Corpus, config: ModelConfig, lam: float):
        self.corpus = corpus
        self.config = config
        self.lam = lam
        K = config.num_senses
        G, T, V = corpus.num_genres, corpus.num_times, corpus.vocab_size
        self.phi_shape = (G, T, K)
        self.psi_shape = (K, T, V)
        self.n_phi = G * T * K
        self.dim = self.n_phi + K * T * V

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        phi = theta[:self.n_phi].reshape(self.phi_shape)
        psi = theta[self.n_phi:].reshape(self.psi_shape)
        lp, g_phi, g_psi = value_and_grad_arrays(self.corpus, phi, psi, self.lam,
                                                 self.config.prior_sd_phi, self.config.prior_sd_psi)
        return lp, np.concatenate((g_phi.ravel(), g_psi.ravel()))


def _leapfrog(target, theta, momentum, grad, eps, inv_mass, n_steps):
    """Returns (theta, momentum, logp, grad) or ``None`` if the path left the finite region."""
    momentum = momentum + 0.5 * eps * grad
    logp = -np.inf
    for i in range(n_steps):
        theta = theta + eps * inv_mass * momentum
        if not np.all(np.isfinite(theta)):
            return None
        logp, grad = target(theta)
        if not math.isfinite(logp):
            return None
        if not np.all(np.isfinite(grad)):
            raise NumericalError(
                f"non-finite gradient at a finite position (leapfrog step {i + 1}, log-posterior {logp})"
            )
        scale = eps if i < n_steps - 1 else 0.5 * eps
        momentum = momentum + scale * grad
    return theta, momentum, logp, grad


def _hmc_step(target, rng, theta, logp, grad, eps, inv_mass, n_steps):
    """One HMC transition. Returns (theta, logp, grad, accept_prob, divergent)."""
    momentum = rng.normal(size=theta.size) / np.sqrt(inv_mass)
    h0 = -logp + 0.5 * float(np.sum(inv_mass * momentum**2))
    u = rng.random()
    out = _leapfrog(target, theta, momentum, grad, eps, inv_mass, n_steps)
    if out is None:
        return theta, logp, grad, 0.0, True
    theta1, mom1, logp1, grad1 = out
    h1 = -logp1 + 0.5 * float(np.sum(inv_mass * mom1**2))
    energy_error = h1 - h0
    if not math.isfinite(energy_error):
        return theta, logp, grad, 0.0, True
    divergent = energy_error > DIVERGENCE_THRESHOLD
    accept_prob = 1.0 if energy_error <= 0 else math.exp(-energy_error)
    if u < accept_prob:
        return theta1, logp1, grad1, accept_prob, divergent
    return theta, logp, grad, accept_prob, divergent


def _initial_step_size(target, rng, theta, logp, grad, inv_mass) -> float:
    """Double or halve a trial step until one-step acceptance crosses 1/2."""
    eps = 1.0

    def log_accept(e):
        momentum = rng.normal(size=theta.size) / np.sqrt(inv_mass)
        h0 = -logp + 0.5 * float(np.sum(inv_mass * momentum**2))
        out = _leapfrog(target, theta, momentum, grad, e, inv_mass, 1)
        if out is None:
            return -np.inf
        _, m1, lp1, _ = out
        h1 = -lp1 + 0.5 * float(np.sum(inv_mass * m1**2))
        return -np.inf if not math.isfinite(h1) else h0 - h1

    log_half = math.log(0.5)
    la = log_accept(eps)
    direction = 1.0 if la > log_half else -1.0
    for _ in range(100):
        if not direction * la > direction * log_half:
            break
        eps *= 2.0**direction
        la = log_accept(eps)
    return eps


class _DualAveraging:
    """Nesterov dual averaging on log step size (gamma=0.05, t0=10, kappa=0.75)."""

    def __init__(self, eps: float, target: float):
        self.mu = math.log(10.0 * eps)
        self.target = target
        self.t = 0
        self.h_bar = 0.0
        self.log_eps = math.log(eps)
        self.log_eps_bar = 0.0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        t = self.t
        eta = 1.0 / (t + 10.0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(t) / 0.05 * self.h_bar
        w = t ** -0.75
        self.log_eps_bar = w * self.log_eps + (1 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def _mass_windows(num_warmup: int) -> list[tuple[int, int]]:
    """Slow adaptation windows ``[start, end)`` for the diagonal mass matrix.

    Stan-style layout: a fast initial buffer, doubling slow windows, and a
    fast terminal buffer during which only the step size adapts.
    """
    if num_warmup < 20:
        return []
    init_buffer, term_buffer, base = 75, 50, 25
    if init_buffer + term_buffer + base > num_warmup:
        init_buffer = int(0.15 * num_warmup)
        term_buffer = int(0.1 * num_warmup)
        base = num_warmup - init_buffer - term_buffer
    windows = []
    start, size = init_buffer, base
    last = num_warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


def _run_chain(corpus: Corpus, config: ModelConfig, lam: float, mcmc: McmcConfig,
               chain: int) -> dict:
    rng = chain_rng(mcmc.seed, chain)
    target = _Target(corpus, config, lam)
    theta = rng.normal(scale=mcmc.init_sd, size=target.dim)
    logp, grad = target(theta)
    if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
        raise NumericalError(f"chain {chain}: non-finite log-posterior or gradient at initialisation")

    inv_mass = np.ones(target.dim)
    eps = _initial_step_size(target, rng, theta, logp, grad, inv_mass)
    adapter = _DualAveraging(eps, mcmc.target_accept)
    windows = _mass_windows(mcmc.num_warmup) if mcmc.adapt_mass else []
    collected: list[np.ndarray] = []
    lo, hi = mcmc.leapfrog_steps

    for it in range(mcmc.num_warmup):
        n_steps = int(rng.integers(lo, hi + 1))
        theta, logp, grad, acc, _ = _hmc_step(target, rng, theta, logp, grad, eps, inv_mass, n_steps)
        eps = adapter.update(acc)
        if windows and windows[0][0] <= it < windows[0][1]:
            collected.append(theta.copy())
        if windows and it + 1 == windows[0][1]:
            samples = np.asarray(collected)
            n = samples.shape[0]
            var = samples.var(axis=0, ddof=1) if n > 1 else np.ones(target.dim)
            inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            collected = []
            windows = windows[1:]
            eps = _initial_step_size(target, rng, theta, logp, grad, inv_mass)
            adapter = _DualAveraging(eps, mcmc.target_accept)
    if mcmc.num_warmup > 0:
        eps = adapter.final

    thetas = np.empty((mcmc.num_draws, target.dim))
    log_posts = np.empty(mcmc.num_draws)
    accept_sum = 0.0
    divergent = 0
    for i in range(mcmc.num_draws):
        n_steps = int(rng.integers(lo, hi + 1))
        theta, logp, grad, acc, div = _hmc_step(target, rng, theta, logp, grad, eps, inv_mass, n_steps)
        thetas[i] = theta
        log_posts[i] = logp
        accept_sum += acc
        divergent += int(div)
    n_phi = int(np.prod(target.phi_shape))
    return {
        "phi": thetas[:, :n_phi].reshape((mcmc.num_draws,) + target.phi_shape),
        "psi": thetas[:, n_phi:].reshape((mcmc.num_draws,) + target.psi_shape),
        "log_post": log_posts,
        "accept": accept_sum / mcmc.num_draws,
        "divergent": divergent,
        "step_size": eps,
    }


def sample_posterior(corpus: Corpus, config: ModelConfig, lam: float, mcmc: McmcConfig,
                     jobs: int = 1) -> PosteriorDraws:
    """Draw from ``prior * likelihood**lam`` with ``mcmc.num_chains`` independent chains.

    Returned draws are chain-major and not yet relabeled.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"learning rate must lie in [0, 1], got {lam}")
    if len(corpus) == 0:
        raise ValueError("cannot sample a posterior for an empty corpus")
    chains = range(mcmc.num_chains)
    if jobs > 1 and mcmc.num_chains > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_chain, itertools.repeat(corpus), itertools.repeat(config),
                                    itertools.repeat(lam), itertools.repeat(mcmc), chains))
    else:
        results = [_run_chain(corpus, config, lam, mcmc, c) for c in chains]

    total = mcmc.num_draws * mcmc.num_chains
    num_divergent = sum(r["divergent"] for r in results)
    warnings = []
    if num_divergent > mcmc.max_divergent_fraction * total:
        msg = f"{num_divergent} of {total} post-warmup transitions diverged at lambda={lam}"
        log.warning(msg)
        warnings.append(msg)
    return PosteriorDraws(
        phi=np.concatenate([r["phi"] for r in results]),
        psi=np.concatenate([r["psi"] for r in results]),
        lam=lam,
        accept_rate=float(np.mean([r["accept"] for r in results])),
        chain_ids=np.repeat(np.arange(mcmc.num_chains), mcmc.num_draws),
        seed=int(mcmc.seed),
        log_post=np.concatenate([r["log_post"] for r in results]),
        step_sizes=tuple(float(r["step_size"]) for r in results),
        num_divergent=num_divergent,
        warnings=tuple(warnings),
    )


def _sense_word_marginals(psi_logits: np.ndarray) -> np.ndarray:
    """Time-marginal sense-word distributions, (K, V)."""
    return softmax(psi_logits, axis=-1).mean(axis=1)


def symmetric_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Pairwise symmetric KL between rows of ``p`` (A, V) and ``q`` (B, V)."""
    lp, lq = np.log(p), np.log(q)
    kl_pq = np.sum(p[:, None, :] * (lp[:, None, :] - lq[None, :, :]), axis=-1)
    kl_qp = np.sum(q[None, :, :] * (lq[None, :, :] - lp[:, None, :]), axis=-1)
    return kl_pq + kl_qp


def best_permutation(reference: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` minimising sum_i symKL(reference[i], candidate[perm[i]]).

    Identity wins ties.
    """
    cost = symmetric_kl(reference, candidate)
    rows, cols = linear_sum_assignment(cost)
    perm = cols[np.argsort(rows)]
    identity = np.arange(cost.shape[0])
    if cost[identity, identity].sum() <= cost[identity, perm].sum():
        return identity
    return perm


def relabel_draws(draws: PosteriorDraws) -> PosteriorDraws:
    """Align sense labels of every draw to the highest-log-posterior draw."""
    if len(draws) == 0:
        return draws.replace(relabeled=True)
    pivot = int(np.argmax(draws.log_post))
    reference = _sense_word_marginals(draws.psi[pivot])
    phi = draws.phi.copy()
    psi = draws.psi.copy()
    for n in range(len(draws)):
        perm = best_permutation(reference, _sense_word_marginals(draws.psi[n]))
        if not np.array_equal(perm, np.arange(perm.size)):
            phi[n] = draws.phi[n][:, :, perm]
            psi[n] = draws.psi[n][perm]
    return draws.replace(phi=phi, psi=psi, relabeled=True)


def posterior_mean_probs(draws: PosteriorDraws) -> ProbParams:
    """Posterior means of the softmax-transformed prevalences and sense-word distributions."""
    if len(draws) == 0:
        raise ValueError("no draws")
    return ProbParams(softmax(draws.phi, axis=-1).mean(axis=0), softmax(draws.psi, axis=-1).mean(axis=0))


_PROJECTION_SEED = 0x5EED
_NUM_PROJECTIONS = 3


def _by_chain(values: np.ndarray, chain_ids: np.ndarray) -> np.ndarray:
    ids = np.unique(chain_ids)
    rows = [values[chain_ids == c] for c in ids]
    n = min(r.size for r in rows)
    return np.array([r[:n] for r in rows])


def convergence_summary(draws: PosteriorDraws) -> ConvergenceSummary:
    """Split R-hat and ESS for the log-posterior and fixed random projections of the logits."""
    if draws.num_chains < 2:
        raise ValueError("convergence summary needs at least 2 chains")
    per_chain = np.bincount(draws.chain_ids).min()
    if per_chain < 4:
        raise ValueError(f"convergence summary needs at least 4 draws per chain, got {per_chain}")
    flat = np.concatenate((draws.phi.reshape(len(draws), -1), draws.psi.reshape(len(draws), -1)), axis=1)
    rng = np.random.default_rng(_PROJECTION_SEED)
    proj = rng.normal(size=(flat.shape[1], _NUM_PROJECTIONS))
    proj /= np.linalg.norm(proj, axis=0)
    monitored = {"log_post": draws.log_post}
    for j in range(_NUM_PROJECTIONS):
        monitored[f"projection_{j}"] = flat @ proj[:, j]

    names, ess, rhat, degenerate, warnings = [], [], [], [], []
    for name, values in monitored.items():
        chains = _by_chain(np.asarray(values, dtype=float), draws.chain_ids)
        deg = diagnostics.is_degenerate(chains)
        names.append(name)
        degenerate.append(deg)
        ess.append(diagnostics.effective_sample_size(chains))
        rhat.append(diagnostics.split_rhat(chains))
        if deg:
            warnings.append(f"{name}: constant trace, ESS and R-hat undefined")
        elif rhat[-1] > 1.05:
            warnings.append(f"{name}: split R-hat {rhat[-1]:.3f} exceeds 1.05")
    return ConvergenceSummary(tuple(names), tuple(ess), tuple(rhat), tuple(degenerate), tuple(warnings))


# -- draw files -------------------------------------------------------------

def write_draws(path: str | Path, draws: PosteriorDraws, model: ModelConfig | None = None,
                mcmc: McmcConfig | None = None) -> None:
    """JSON-lines file: one header record, then one record per draw."""
    header = {
        "record": "header",
        "lambda": draws.lam,
        "seed": int(draws.seed),
        "num_draws": len(draws),
        "phi_shape": list(draws.phi.shape[1:]),
        "psi_shape": list(draws.psi.shape[1:]),
        "accept_rate": draws.accept_rate,
        "step_sizes": list(draws.step_sizes),
        "num_divergent": int(draws.num_divergent),
        "warnings": list(draws.warnings),
        "relabeled": draws.relabeled,
        "model": asdict(model) if model is not None else None,
        "mcmc": mcmc.to_dict() if mcmc is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for n in range(len(draws)):
            rec = {
                "record": "draw",
                "index": n,
                "chain": int(draws.chain_ids[n]),
                "log_post": float(draws.log_post[n]),
                "phi": draws.phi[n].ravel().tolist(),
                "psi": draws.psi[n].ravel().tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def read_draws(path: str | Path) -> tuple[PosteriorDraws, dict]:
    """Inverse of :func:`write_draws`; returns the draws and the header record."""
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("record") != "header":
            raise ValueError(f"{path}: first record is not a header")
        phi_shape, psi_shape = tuple(header["phi_shape"]), tuple(header["psi_shape"])
        phi, psi, chains, log_post = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            rec = json.loads(line)
            if rec.get("record") != "draw":
                raise ValueError(f"{path}:{lineno}: expected a draw record")
            phi.append(np.array(rec["phi"], dtype=float).reshape(phi_shape))
            psi.append(np.array(rec["psi"], dtype=float).reshape(psi_shape))
            chains.append(rec["chain"])
            log_post.append(rec["log_post"])
    if len(phi) != header["num_draws"]:
        raise ValueError(f"{path}: header announces {header['num_draws']} draws, found {len(phi)}")
    draws = PosteriorDraws(
        phi=np.array(phi).reshape((-1,) + phi_shape),
        psi=np.array(psi).reshape((-1,) + psi_shape),
        lam=float(header["lambda"]),
        accept_rate=float(header["accept_rate"]),
        chain_ids=np.array(chains, dtype=int),
        seed=int(header["seed"]),
        log_post=np.array(log_post, dtype=float),
        step_sizes=tuple(header.get("step_sizes", ())),
        num_divergent=int(header.get("num_divergent", 0)),
        warnings=tuple(header.get("warnings", ())),
        relabeled=bool(header.get("relabeled", False)),
    )
    return draws, header
