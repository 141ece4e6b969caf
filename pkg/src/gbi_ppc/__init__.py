"""Learning-rate selection for tempered-likelihood Bayes via posterior predictive checks."""
from .data import GeneratorConfig, generate_synthetic, load_corpus, save_corpus
from .errors import ConfigError, CorpusError, GbiPpcError, NumericalError
from .evaluation import evaluate, hpd_interval
from .model import (
    Corpus,
    ModelConfig,
    ParamState,
    ProbParams,
    Snippet,
    grad_log_posterior,
    log_likelihood,
    log_posterior_unnorm,
    log_prior,
    sense_posterior,
    softmax,
)
from .ppc import run_ppc
from .sampler import McmcConfig, PosteriorDraws, relabel_draws, sample_posterior
from .selector import SelectorConfig, choose, select_lambda

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Corpus", "CorpusError", "GbiPpcError", "GeneratorConfig", "McmcConfig",
    "ModelConfig", "NumericalError", "ParamState", "PosteriorDraws", "ProbParams", "SelectorConfig",
    "Snippet", "choose", "evaluate", "generate_synthetic", "grad_log_posterior", "hpd_interval",
    "load_corpus", "log_likelihood", "log_posterior_unnorm", "log_prior", "relabel_draws", "run_ppc",
    "sample_posterior", "save_corpus", "select_lambda", "sense_posterior", "softmax",
]
