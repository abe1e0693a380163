"""Scalar/vector kernels, seeded randomness and the finite-difference oracle.

Everything here works in float64. Functions accept scalars or arrays and
broadcast the usual numpy way.
"""

import math
import zlib

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def sigmoid(z):
    """Logistic function, stable for large |z| (saturates instead of overflowing)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def relu(z):
    return np.maximum(z, 0.0)


def relu_grad(z):
    # subgradient at exactly 0 is 0
    return (np.asarray(z) > 0).astype(np.float64)


def log_sum_exp(v, axis=None):
    """log(sum(exp(v))) along ``axis`` using the max-shift trick."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty input")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def gaussian_log_pdf(x, mu, sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("gaussian_log_pdf needs sigma > 0")
    r = (np.asarray(x, dtype=np.float64) - mu) / sigma
    out = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * r * r
    return out if np.ndim(out) else float(out)


def finite_diff_gradient(f, theta, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at the vector ``theta``.

    ``f`` is called 2*len(theta) times with perturbed copies of ``theta``.
    """
    theta = np.array(theta, dtype=np.float64).ravel()
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        fp = float(f(theta))
        theta[i] = orig - eps
        fm = float(f(theta))
        theta[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective when perturbing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


class Rng:
    """Seeded random stream (numpy PCG64) with named, independent substreams.

    Two ``Rng`` built from the same seed and the same chain of
    ``substream`` keys produce identical draws.
    """

    def __init__(self, seed, _path=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(_path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *self.path]
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def substream(self, tag, index=0):
        key = (zlib.crc32(str(tag).encode("utf-8")), int(index))
        return Rng(self.seed, self.path + key)

    def uniform(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def sample_permutation(rng, D):
    """Uniform random ordering of ``range(D)`` (0-based)."""
    return rng.permutation(D)


def sample_subset(rng, D, size):
    """Uniform random ``size``-subset of ``range(D)``, in draw order."""
    if not 0 <= size <= D:
        raise ValueError(f"subset size {size} outside [0, {D}]")
    return rng.permutation(D)[:size]
