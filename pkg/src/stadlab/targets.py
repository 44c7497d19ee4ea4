"""Analytic target densities and synthetic datasets.

Every target provides an exact log density, exact score, and exact
sampling, so likelihood pipelines can be checked against ground truth.
Unconditional targets are Gaussian mixtures (a single Gaussian and the
two-moons arc mixture are special cases); the conditional kind is a mixture
of Gaussians whose component means depend linearly on a context vector.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ._rng import child_rng


class InvalidTarget(ValueError):
    """Degenerate target parameters (non-PD covariance, bad weights, ...)."""


@dataclass
class Dataset:
    """Samples plus optional contexts and normalization metadata."""

    samples: np.ndarray
    contexts: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    context_shift: Optional[np.ndarray] = None
    context_scale: Optional[np.ndarray] = None
    seed: int = 0

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def context_dim(self) -> int:
        return 0 if self.contexts is None else self.contexts.shape[1]

    def normalized(self) -> "Dataset":
        """Standardize per coordinate; records shift/scale for inversion."""
        shift = self.samples.mean(axis=0)
        scale = self.samples.std(axis=0)
        if np.any(scale < 1e-12):
            raise InvalidTarget("dataset has a zero-variance coordinate")
        out = Dataset(
            samples=(self.samples - shift) / scale,
            shift=shift,
            scale=scale,
            seed=self.seed,
        )
        if self.contexts is not None:
            cshift = self.contexts.mean(axis=0)
            cscale = self.contexts.std(axis=0)
            cscale = np.where(cscale < 1e-12, 1.0, cscale)
            out.contexts = (self.contexts - cshift) / cscale
            out.context_shift = cshift
            out.context_scale = cscale
        return out


class TargetDensity:
    """Mixture-of-Gaussians target, optionally context-conditional.

    Parameters
    ----------
    kind : {"gaussian", "gaussian_mixture", "two_moons", "conditional_gaussian"}
    weights : (K,) mixture weights, summing to 1.
    means : (K, D) component offsets. For the conditional kind the component
        mean is ``context_maps[k] @ c + means[k]``.
    covariances : (K, D, D) full covariances, or (K, D) diagonal variances.
    context_maps : (K, D, C), conditional kind only.
    """

    def __init__(self, kind, weights, means, covariances, context_maps=None):
        self.kind = kind
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.dim = self.means.shape[1]
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidTarget("mixture weights must be positive and sum to 1")
        covariances = np.asarray(covariances, dtype=float)
        if covariances.ndim == 2:  # diagonal variances
            if np.any(covariances <= 0):
                raise InvalidTarget("diagonal variances must be positive")
            self.diag_vars = covariances
            self.covs = None
        else:
            self.diag_vars = None
            self.covs = covariances
            self._eig = []
            for k in range(covariances.shape[0]):
                C = covariances[k]
                if not np.allclose(C, C.T, atol=1e-10):
                    raise InvalidTarget("covariance is not symmetric")
                lam, V = np.linalg.eigh(C)
                if lam.min() <= 0:
                    raise InvalidTarget("covariance is not positive definite")
                self._eig.append((lam, V))
        self.context_maps = None
        if context_maps is not None:
            self.context_maps = np.asarray(context_maps, dtype=float)
            self.context_dim = self.context_maps.shape[2]
        else:
            self.context_dim = 0
        if kind == "conditional_gaussian" and self.context_maps is None:
            raise InvalidTarget("conditional target needs context maps")

    # -- component moments ----------------------------------------------------

    def _component_means(self, x_batch, c):
        """(B, K, D) means; conditional means vary per sample via context."""
        B = x_batch.shape[0]
        K = self.weights.shape[0]
        if self.context_maps is None:
            return np.broadcast_to(self.means, (B, K, self.dim))
        C = np.asarray(c, dtype=float)
        if C.ndim == 1:
            C = np.broadcast_to(C, (B, C.shape[0]))
        mu = np.einsum("kdc,bc->bkd", self.context_maps, C)
        return mu + self.means[None, :, :]

    def _log_comp(self, x_batch, mu):
        """(B, K) per-component log densities given per-sample means."""
        B, K = mu.shape[0], mu.shape[1]
        out = np.empty((B, K))
        xc = x_batch[:, None, :] - mu
        if self.diag_vars is not None:
            quad = np.sum(xc ** 2 / self.diag_vars[None], axis=2)
            logdet = np.sum(np.log(2.0 * np.pi * self.diag_vars), axis=1)
            out = -0.5 * (quad + logdet[None, :])
        else:
            for k in range(K):
                lam, V = self._eig[k]
                y = xc[:, k, :] @ V
                quad = np.sum(y * y / lam, axis=1)
                out[:, k] = -0.5 * (quad + np.sum(np.log(2.0 * np.pi * lam)))
        return out

    def log_density(self, x, c=None):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None] if single else x
        mu = self._component_means(X, c)
        lp = logsumexp(self._log_comp(X, mu) + np.log(self.weights)[None, :], axis=1)
        return float(lp[0]) if single else lp

    def score(self, x, c=None):
        """Gradient of log density wrt x: responsibility-weighted pulls."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None] if single else x
        mu = self._component_means(X, c)
        logc = self._log_comp(X, mu) + np.log(self.weights)[None, :]
        logc -= logsumexp(logc, axis=1, keepdims=True)
        resp = np.exp(logc)  # (B, K)
        xc = X[:, None, :] - mu
        if self.diag_vars is not None:
            pulls = -xc / self.diag_vars[None]
        else:
            pulls = np.empty_like(xc)
            for k in range(self.weights.shape[0]):
                lam, V = self._eig[k]
                pulls[:, k, :] = -(xc[:, k, :] @ V) / lam @ V.T
        g = np.sum(resp[:, :, None] * pulls, axis=1)
        return g[0] if single else g

    def sample(self, n, seed, c=None) -> Dataset:
        """Exact mixture sampling; deterministic in the seed."""
        if self.context_maps is not None and c is None:
            raise InvalidTarget("conditional target needs contexts to sample")
        rng = child_rng(seed, "target-sample", self.kind)
        comp = rng.choice(self.weights.shape[0], size=n, p=self.weights)
        X = np.empty((n, self.dim))
        mu = self._component_means(np.zeros((n, 1)), c) if self.context_maps is not None else None
        for k in range(self.weights.shape[0]):
            idx = np.where(comp == k)[0]
            if idx.size == 0:
                continue
            xi = rng.standard_normal((idx.size, self.dim))
            if self.diag_vars is not None:
                dev = xi * np.sqrt(self.diag_vars[k])
            else:
                lam, V = self._eig[k]
                dev = (xi * np.sqrt(lam)) @ V.T
            base = mu[idx, k, :] if mu is not None else self.means[k]
            X[idx] = base + dev
        contexts = None
        if c is not None:
            C = np.asarray(c, dtype=float)
            contexts = np.broadcast_to(C, (n, C.shape[-1])).copy() if C.ndim == 1 else C.copy()
        return Dataset(samples=X, contexts=contexts, seed=seed)


def make_gaussian(mean, covariance) -> TargetDensity:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
    return TargetDensity("gaussian", [1.0], mean[None], covariance[None])


def make_gaussian_mixture(weights, means, covariances) -> TargetDensity:
    return TargetDensity("gaussian_mixture", weights, means, covariances)


def make_two_moons(noise: float = 0.15, components_per_moon: int = 12) -> TargetDensity:
    """Two interleaved crescents as an exact arc mixture in 2-D."""
    K = components_per_moon
    th = np.linspace(0.0, np.pi, K)
    top = np.stack([np.cos(th), np.sin(th)], axis=1)
    bottom = np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], axis=1)
    means = np.vstack([top, bottom])
    weights = np.full(2 * K, 1.0 / (2 * K))
    covs = np.tile(noise ** 2 * np.eye(2), (2 * K, 1, 1))
    return TargetDensity("two_moons", weights, means, covs)


def make_conditional_gaussian(weights, context_maps, offsets, diag_vars) -> TargetDensity:
    return TargetDensity(
        "conditional_gaussian", weights, offsets, np.asarray(diag_vars, dtype=float), context_maps=context_maps
    )


# -- synthetic conditional task at survey scale ---------------------------------

COSMOS_LIKE_DIM = 26
COSMOS_LIKE_COMPONENTS = 3


def make_cosmos_like(seed: int, n_samples: int = 420_000):
    """26-dim conditional mixture standing in for a flux-uncertainty task.

    Three components with context-dependent means through fixed random
    linear maps and heteroscedastic diagonal covariances; contexts are
    standard normal 26-vectors. Returns the target and a sampled dataset
    with one context per row.
    """
    D = COSMOS_LIKE_DIM
    K = COSMOS_LIKE_COMPONENTS
    rng = child_rng(seed, "cosmos-like-params")
    maps = rng.standard_normal((K, D, D)) * np.sqrt(0.25 / D)
    offsets = rng.uniform(-0.6, 0.6, size=(K, D))
    diag_vars = rng.uniform(0.2 ** 2, 0.8 ** 2, size=(K, D))
    weights = np.array([0.5, 0.3, 0.2])
    target = make_conditional_gaussian(weights, maps, offsets, diag_vars)

    rng_c = child_rng(seed, "cosmos-like-contexts")
    contexts = rng_c.standard_normal((n_samples, D))
    data = target.sample(n_samples, seed, c=contexts)
    return target, data


def conditional_marginal_std(target: TargetDensity) -> np.ndarray:
    """Analytic per-coordinate std of x with contexts ~ N(0, I).

    Law of total variance over the component label and the context:
    E[x_j^2] = sum_k w_k ((A_k A_k^T)_jj + d_kj + m_kj^2), minus the squared
    mean sum_k w_k m_kj.
    """
    if target.context_maps is None:
        raise InvalidTarget("analytic marginal std needs a conditional target")
    w = target.weights
    AAt = np.einsum("kdc,kdc->kd", target.context_maps, target.context_maps)
    second = np.sum(w[:, None] * (AAt + target.diag_vars + target.means ** 2), axis=0)
    mean = np.sum(w[:, None] * target.means, axis=0)
    return np.sqrt(second - mean ** 2)


# -- dataset IO ------------------------------------------------------------------

def save_dataset_csv(ds: Dataset, path):
    """CSV with header x0..x{D-1}[,c0..c{C-1}]."""
    cols = [f"x{j}" for j in range(ds.dim)]
    if ds.contexts is not None:
        cols += [f"c{j}" for j in range(ds.context_dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(ds.n):
            row = list(ds.samples[i])
            if ds.contexts is not None:
                row += list(ds.contexts[i])
            writer.writerow([repr(float(v)) for v in row])


def load_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=float)
    x_cols = [i for i, name in enumerate(header) if name.startswith("x")]
    c_cols = [i for i, name in enumerate(header) if name.startswith("c")]
    samples = data[:, x_cols]
    contexts = data[:, c_cols] if c_cols else None
    return Dataset(samples=samples, contexts=contexts)


def save_dataset_binary(ds: Dataset, path):
    """Raw little-endian float64 block plus a JSON sidecar at path + .json."""
    block = ds.samples.astype("<f8").tobytes()
    sidecar = {
        "dtype": "<f8",
        "n": ds.n,
        "dim": ds.dim,
        "context_dim": ds.context_dim,
        "seed": ds.seed,
        "shift": None if ds.shift is None else list(ds.shift),
        "scale": None if ds.scale is None else list(ds.scale),
    }
    if ds.contexts is not None:
        block += ds.contexts.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(block)
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def load_dataset_binary(path) -> Dataset:
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    raw = np.fromfile(path, dtype="<f8")
    n, d, cd = sidecar["n"], sidecar["dim"], sidecar["context_dim"]
    samples = raw[: n * d].reshape(n, d)
    contexts = raw[n * d :].reshape(n, cd) if cd else None
    ds = Dataset(samples=samples, contexts=contexts, seed=sidecar["seed"])
    if sidecar.get("shift") is not None:
        ds.shift = np.asarray(sidecar["shift"])
        ds.scale = np.asarray(sidecar["scale"])
    return ds
