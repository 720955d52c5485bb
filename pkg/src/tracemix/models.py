"""Count-vector distributions and their Gamma-collapsed likelihood kernels.

The correlated count model draws a symmetric latent matrix Y with independent
Poisson entries and emits X = Y @ 1, so off-diagonal rates double as pairwise
covariances.  The sparse variant restricts the correlated block to an active
dimension subset b and models everything else as low-rate independent noise.
Rates carry Gamma priors (shape/rate); integrating them out gives the
``log_F`` kernels that every sampler conditional is built from.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln


@dataclass(frozen=True)
class Hyperparams:
    """Prior hyperparameters shared by all model variants.

    Gamma parameters are shape/RATE: the collapsed posterior denominator
    (b + n)^(a + S) is only consistent with rate semantics.
    """

    a_bar: float = 1.0    # Gamma shape for active-block rates
    b_bar: float = 1.0    # Gamma rate for active-block rates
    a_hat: float = 1.0    # Gamma shape for noise rates
    b_hat: float = 10.0   # Gamma rate for noise rates; keeps noise means small
    a_prime: float = 1.0  # Beta(a', b') over per-dimension activity
    b_prime: float = 1.0
    alpha: float = 1.0    # concentration of the per-row/cluster process
    gamma: float = 1.0    # top-level stick-breaking concentration

    def __post_init__(self):
        for name in ("a_bar", "b_bar", "a_hat", "b_hat",
                     "a_prime", "b_prime", "alpha", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"hyperparameter {name} must be positive")


@dataclass(frozen=True)
class MVPParams:
    """Full-covariance parameters: a symmetric non-negative rate matrix."""

    Lambda: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.Lambda, dtype=float)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
            raise ValueError("Lambda must be a square matrix")
        if not np.allclose(lam, lam.T):
            raise ValueError("Lambda must be symmetric")
        if np.any(lam < 0):
            raise ValueError("Lambda entries must be non-negative")
        object.__setattr__(self, "Lambda", lam)

    @property
    def dim(self):
        return self.Lambda.shape[0]


@dataclass(frozen=True)
class SMVPParams:
    """Sparse variant: correlated rates on active dims, noise rates elsewhere.

    Lambda entries are only meaningful where b_j = b_l = 1; inactive
    dimensions emit independent Poisson(lambda_hat_j) counts.
    """

    Lambda: np.ndarray
    lambda_hat: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.Lambda, dtype=float)
        lhat = np.asarray(self.lambda_hat, dtype=float)
        b = np.asarray(self.b, dtype=np.int8)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
            raise ValueError("Lambda must be a square matrix")
        if lhat.shape != (lam.shape[0],) or b.shape != (lam.shape[0],):
            raise ValueError("lambda_hat and b must match Lambda's dimension")
        if np.any(lhat < 0):
            raise ValueError("lambda_hat must be non-negative")
        if not np.all((b == 0) | (b == 1)):
            raise ValueError("b must be binary")
        act = b.astype(bool)
        sub = lam[np.ix_(act, act)]
        if not np.allclose(sub, sub.T) or np.any(sub < 0):
            raise ValueError("Lambda must be symmetric non-negative on active dims")
        object.__setattr__(self, "Lambda", lam)
        object.__setattr__(self, "lambda_hat", lhat)
        object.__setattr__(self, "b", b)

    @property
    def dim(self):
        return self.Lambda.shape[0]


def sample_mvp(params: MVPParams, rng) -> np.ndarray:
    """Draw one correlated count vector: X_j = sum_l Y_jl with Y symmetric.

    E(X) = Lambda @ 1 and Cov(X_j, X_l) = lambda_jl for j != l.
    """
    m = params.dim
    iu = np.triu_indices(m)
    y = rng.poisson(params.Lambda[iu])
    ymat = np.zeros((m, m), dtype=np.int64)
    ymat[iu] = y
    ymat = ymat + ymat.T - np.diag(np.diag(ymat))
    return ymat.sum(axis=1)


def sample_smvp(params: SMVPParams, rng) -> np.ndarray:
    """Draw one sparse count vector: MVP on active dims, noise elsewhere."""
    act = params.b.astype(bool)
    x = np.zeros(params.dim, dtype=np.int64)
    if act.any():
        sub = params.Lambda[np.ix_(act, act)]
        x[act] = sample_mvp(MVPParams(sub), rng)
    if (~act).any():
        x[~act] = rng.poisson(params.lambda_hat[~act])
    return x


def _log_f(s, n, log_fact_sum, shape, rate):
    """log Gamma(shape+s) - (shape+s) log(rate+n) - log_fact_sum, broadcast."""
    s = np.asarray(s, dtype=float)
    n = np.asarray(n, dtype=float)
    return gammaln(shape + s) - (shape + s) * np.log(rate + n) - log_fact_sum


def log_F(S, n, log_fact_sum, hp: Hyperparams):
    """Collapsed log-kernel of a Poisson-Gamma factor over active rates.

    S is the summed count, n the number of pooled observations and
    log_fact_sum the accumulated log(Y!) terms.  Computed in log space;
    safe for S up to ~1e7.  Note the kernel is unnormalised: subtract
    log_F(0, 0, 0, hp) to get the proper marginal likelihood.
    """
    return _log_f(S, n, log_fact_sum, hp.a_bar, hp.b_bar)


def log_F_hat(S_hat, n_hat, log_fact_sum, hp: Hyperparams):
    """Same kernel with the noise-rate prior (a_hat, b_hat)."""
    return _log_f(S_hat, n_hat, log_fact_sum, hp.a_hat, hp.b_hat)


def mu_from_params(params: SMVPParams) -> np.ndarray:
    """Per-dimension emission means: row sums on the active block, noise rates
    elsewhere.  With all dims active this reduces to Lambda @ 1."""
    b = params.b.astype(float)
    active_rows = b * (params.Lambda @ b)
    return active_rows + (1.0 - b) * params.lambda_hat


def log_poisson_vec(x, mu) -> float:
    """Joint log-pmf of independent Poisson coordinates.

    mu_i = 0 with x_i > 0 yields -inf, which is a legal return.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        xlog = np.where(x > 0, x * np.log(mu), 0.0)
    return float(np.sum(xlog - mu - gammaln(x + 1.0)))


def log_poisson_table(X, mu) -> np.ndarray:
    """(T, K) table of log_poisson_vec(X[t], mu[k]) for batched decoding."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        xlog = np.where(X[:, None, :] > 0, X[:, None, :] * np.log(mu[None]), 0.0)
    return (xlog - mu[None]).sum(axis=2) - gammaln(X + 1.0).sum(axis=1)[:, None]
