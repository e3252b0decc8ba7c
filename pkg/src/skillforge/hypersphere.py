"""Unit-sphere geometry and von Mises-Fisher (vMF) mathematics.

Vectors are plain numpy arrays. Functions that accept a single vector also
accept a batch along the leading axis unless noted otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEmbedding, DimensionMismatch, NonPsdCovariance, ZeroVector

NORM_FLOOR = 1e-12
BESSEL_SWITCH = 50.0
LOG_2PI = math.log(2.0 * math.pi)


def normalize(v, axis=-1):
    """Project ``v`` onto the unit sphere along ``axis``."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm <= NORM_FLOOR):
        raise ZeroVector(f"cannot normalize vector with norm <= {NORM_FLOOR}")
    return v / norm


def is_unit(v, tol=1e-9):
    v = np.asarray(v, dtype=float)
    return bool(np.all(np.abs(np.linalg.norm(v, axis=-1) - 1.0) <= tol))


# ---------------------------------------------------------------------------
# Modified Bessel function of the first kind, in log space
# ---------------------------------------------------------------------------

def _log_iv_series(nu, x):
    # I_nu(x) = sum_m (x/2)^(2m+nu) / (m! Gamma(m+nu+1)); all terms positive.
    half_log = math.log(x / 2.0)
    n_terms = int(x) + 60
    logs = np.array(
        [(2 * m + nu) * half_log - math.lgamma(m + 1) - math.lgamma(m + nu + 1) for m in range(n_terms)]
    )
    top = logs.max()
    return top + math.log(np.exp(logs - top).sum())


def _log_iv_asymptotic(nu, x):
    # Hankel expansion: I_nu(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(nu) / x^k
    mu = 4.0 * nu * nu
    total, term = 1.0, 1.0
    for k in range(1, 60):
        nxt = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        if abs(nxt) >= abs(term) and k > 1:
            break
        term = nxt
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    return x - 0.5 * (LOG_2PI + math.log(x)) + math.log(total)


def log_bessel_iv(nu, x):
    """log I_nu(x) for nu >= 0 and x > 0.

    Power series below ``BESSEL_SWITCH``, Hankel asymptotic expansion above.
    """
    nu = float(nu)
    x = float(x)
    if nu < 0:
        raise ValueError("order must be non-negative")
    if not x > 0 or not math.isfinite(x):
        raise ValueError("argument must be positive and finite")
    if x <= BESSEL_SWITCH:
        return _log_iv_series(nu, x)
    return _log_iv_asymptotic(nu, x)


def mean_resultant_length(dim, kappa):
    """A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa), the expected cosine to the mean."""
    return math.exp(log_bessel_iv(dim / 2.0, kappa) - log_bessel_iv(dim / 2.0 - 1.0, kappa))


def vmf_log_normalizer(dim, kappa):
    """log C_d(kappa) for the vMF density on the sphere in R^dim."""
    _check_kappa(kappa)
    nu = dim / 2.0 - 1.0
    return nu * math.log(kappa) - (dim / 2.0) * LOG_2PI - log_bessel_iv(nu, kappa)


def _check_kappa(kappa):
    if not (kappa > 0 and math.isfinite(kappa)):
        raise ValueError(f"concentration must be positive and finite, got {kappa}")


@dataclass(frozen=True)
class VmfParams:
    mean_direction: np.ndarray
    concentration: float

    def __post_init__(self):
        mu = np.asarray(self.mean_direction, dtype=float)
        if mu.ndim != 1 or mu.shape[0] < 2:
            raise DimensionMismatch("mean direction must be a vector with k >= 2")
        _check_kappa(self.concentration)
        object.__setattr__(self, "mean_direction", normalize(mu))

    @property
    def dim(self):
        return self.mean_direction.shape[0]


def vmf_log_density(params: VmfParams, z):
    """log q(z) = log C_d(kappa) + kappa <mu, z>. ``z`` may be a batch."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.dim:
        raise DimensionMismatch(f"z has dim {z.shape[-1]}, expected {params.dim}")
    return vmf_log_normalizer(params.dim, params.concentration) + params.concentration * (z @ params.mean_direction)


def vmf_kl(mu_p, mu_q, kappa):
    """KL(vMF(mu_p, kappa) || vMF(mu_q, kappa)) = kappa A_d(kappa) (1 - <mu_p, mu_q>).

    Row-wise for batched inputs.
    """
    mu_p = np.asarray(mu_p, dtype=float)
    mu_q = np.asarray(mu_q, dtype=float)
    if mu_p.shape != mu_q.shape:
        raise DimensionMismatch(f"{mu_p.shape} vs {mu_q.shape}")
    dim = mu_p.shape[-1]
    return kappa * mean_resultant_length(dim, kappa) * (1.0 - np.sum(mu_p * mu_q, axis=-1))


def _sample_vmf_cosines(rng, dim, kappa, count):
    # Wood (1994) rejection sampler for w = <mu, z>.
    m1 = dim - 1.0
    b = m1 / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + m1 * m1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m1 * math.log1p(-x0 * x0)
    out = np.empty(count)
    filled = 0
    while filled < count:
        n = max(2 * (count - filled), 16)
        beta = rng.beta(m1 / 2.0, m1 / 2.0, size=n)
        w = (1.0 - (1.0 + b) * beta) / (1.0 - (1.0 - b) * beta)
        u = rng.uniform(size=n)
        ok = kappa * w + m1 * np.log1p(-x0 * w) - c >= np.log(u)
        got = w[ok][: count - filled]
        out[filled : filled + got.size] = got
        filled += got.size
    return out


def vmf_sample(params: VmfParams, count, rng_seed):
    """Draw ``count`` i.i.d. unit vectors from vMF(mu, kappa); shape (count, k)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mu = params.mean_direction
    w = _sample_vmf_cosines(rng, params.dim, params.concentration, count)
    v = rng.standard_normal((count, params.dim))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    z = w[:, None] * mu + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def uniform_sphere_sample(rng, dim, count=None):
    """k/||k|| with k ~ N(0, I)."""
    shape = (dim,) if count is None else (count, dim)
    return normalize(rng.standard_normal(shape))


def motion_embedding(states):
    """Renormalized mean of a motion's state embeddings (rows of ``states``)."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] == 0:
        raise DegenerateEmbedding("need a non-empty (l, k) array of embeddings")
    mean = states.mean(axis=0)
    if np.linalg.norm(mean) <= NORM_FLOOR:
        raise DegenerateEmbedding("mean embedding has vanishing norm")
    return mean / np.linalg.norm(mean)


# ---------------------------------------------------------------------------
# Gaussian feature statistics and the Frechet distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianFeatureStats:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise DimensionMismatch(f"covariance {cov.shape} does not match mean {mean.shape}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9:
            raise NonPsdCovariance("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def fit(cls, features, ridge=0.0):
        """Fit mean and (unbiased) covariance to rows of ``features``."""
        x = np.asarray(features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        mean = x.mean(axis=0)
        if x.shape[0] > 1:
            cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        else:
            cov = np.zeros((x.shape[1], x.shape[1]))
        cov = 0.5 * (cov + cov.T) + ridge * np.eye(x.shape[1])
        return cls(mean, cov)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -1e-6:
        raise NonPsdCovariance(f"eigenvalue {vals.min():.3g} < -1e-6")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianFeatureStats, b: GaussianFeatureStats):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch(f"{a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.covariance)
    _psd_sqrt(b.covariance)
    # Tr (S_a S_b)^{1/2} == Tr (S_a^{1/2} S_b S_a^{1/2})^{1/2}, which is symmetric.
    inner = root_a @ b.covariance @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_cross)
