"""Dense kernels for the latent dynamics and the losses.

Matrix exponential by scaling and squaring of the truncated power series,
LU solve with partial pivoting, eigenvalues by shifted QR on the Hessenberg
form (for the spectral abscissa) and a radix-2 / Bluestein FFT.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "SingularMatrixError",
    "ConvergenceError",
    "matrix_exp",
    "matrix_exp_action",
    "solve_linear",
    "hessenberg",
    "eigenvalues",
    "spectral_abscissa",
    "fft",
    "ifft",
    "fft2",
    "dft_matrix",
]

EXP_SERIES_TOL = 1e-16
EXP_MAX_TERMS = 30


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class ConvergenceError(ArithmeticError):
    pass


def _square(M, name="matrix"):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise ValueError(f"{name} must be square with n >= 1, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def _norm1(M):
    return float(np.abs(M).sum(axis=0).max())


def matrix_exp(M) -> np.ndarray:
    """exp(M) from the power series on M / 2**s followed by s squarings.

    s = max(0, ceil(log2 ||M||_1)); the series stops once a term's 1-norm
    drops below 1e-16 of the partial sum's (at most 30 terms).
    """
    M = _square(M)
    n = M.shape[0]
    norm = _norm1(M)
    s = max(0, math.ceil(math.log2(norm))) if norm > 0 else 0
    A = M / (2.0 ** s)
    # |partial sum|_1 <= exp(|A|_1), so the sum's norm is only needed once the
    # term is small enough that the stopping test could pass
    ceiling = EXP_SERIES_TOL * math.exp(_norm1(A))
    result = np.eye(n)
    term = np.eye(n)
    col = 0
    for k in range(1, EXP_MAX_TERMS + 1):
        term = term @ A
        term /= k
        result += term
        # one column's abs sum is a lower bound on |term|_1 and costs 1/n of it
        if np.abs(term[:, col]).sum() >= ceiling:
            continue
        sums = np.abs(term).sum(axis=0)
        col = int(np.argmax(sums))
        if sums[col] < ceiling and sums[col] < EXP_SERIES_TOL * _norm1(result):
            break
    for _ in range(s):
        result = result @ result
    return result


def matrix_exp_action(K, tau: float, z) -> np.ndarray:
    """exp(K tau) z; ``z`` may carry leading batch axes (row vectors)."""
    K = _square(K, "generator")
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != K.shape[0]:
        raise ValueError(f"state dimension {z.shape[-1]} does not match generator {K.shape[0]}")
    E = matrix_exp(K * tau)
    return z @ E.T


def solve_linear(A, b, pivot_tol: float = 1e-12) -> np.ndarray:
    """Solve A x = b by LU with partial pivoting. ``b`` may be a vector or matrix."""
    A = _square(A)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"right-hand side has {b.shape[0]} rows, expected {n}")
    LU = A.copy()
    x = b.copy().reshape(n, -1)
    for k in range(n):
        p = k + int(np.argmax(np.abs(LU[k:, k])))
        if abs(LU[p, k]) <= pivot_tol:
            raise SingularMatrixError(f"pivot {abs(LU[p, k]):.3e} at column {k} is below {pivot_tol:g}")
        if p != k:
            LU[[k, p]] = LU[[p, k]]
            x[[k, p]] = x[[p, k]]
        factors = LU[k + 1:, k] / LU[k, k]
        LU[k + 1:, k] = factors
        LU[k + 1:, k + 1:] -= np.outer(factors, LU[k, k + 1:])
        x[k + 1:] -= np.outer(factors, x[k])
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - LU[k, k + 1:] @ x[k + 1:]) / LU[k, k]
    return x.reshape(b.shape)


def hessenberg(A) -> np.ndarray:
    """Upper Hessenberg form by Householder similarity transforms."""
    H = _square(A).copy()
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(alpha, x[0]) if x[0] != 0 else alpha
        v /= np.linalg.norm(v)
        H[k + 1:, :] -= 2.0 * np.outer(v, v @ H[k + 1:, :])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
        H[k + 2:, k] = 0.0
    return H


def _wilkinson_shift(a, b, c, d):
    # eigenvalue of [[a, b], [c, d]] closest to d
    tr = a + d
    det = a * d - b * c
    disc = np.sqrt(tr * tr / 4.0 - det + 0j)
    l1, l2 = tr / 2.0 + disc, tr / 2.0 - disc
    return l1 if abs(l1 - d) < abs(l2 - d) else l2


def eigenvalues(K, tol: float = 1e-10, max_sweeps: int = 500) -> np.ndarray:
    """Eigenvalues via complex Wilkinson-shifted QR sweeps on the Hessenberg form."""
    H = hessenberg(K).astype(np.complex128)
    n = H.shape[0]
    scale_all = max(np.abs(H).max(), 1e-300)
    eigs = []
    hi = n - 1
    sweeps = 0
    since_deflation = 0
    while hi >= 0:
        if hi == 0:
            eigs.append(H[0, 0])
            break
        lo = hi
        while lo > 0:
            scale = abs(H[lo, lo]) + abs(H[lo - 1, lo - 1])
            if abs(H[lo, lo - 1]) <= tol * (scale if scale > 0 else scale_all):
                H[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            eigs.append(H[hi, hi])
            hi -= 1
            since_deflation = 0
            continue
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"QR iteration did not converge in {max_sweeps} sweeps")
        sweeps += 1
        since_deflation += 1
        blk = H[lo:hi + 1, lo:hi + 1]
        if since_deflation % 11 == 0:
            mu = blk[-1, -1] + abs(blk[-1, -2]) * (0.75 + 0.5j)  # exceptional shift
        else:
            mu = _wilkinson_shift(blk[-2, -2], blk[-2, -1], blk[-1, -2], blk[-1, -1])
        eye = np.eye(blk.shape[0])
        Q, R = np.linalg.qr(blk - mu * eye)
        H[lo:hi + 1, lo:hi + 1] = R @ Q + mu * eye
    return np.array(eigs[::-1])


def spectral_abscissa(K, tol: float = 1e-10, max_sweeps: int = 500) -> float:
    """max Re(lambda) over the eigenvalues of K."""
    return float(np.max(eigenvalues(K, tol=tol, max_sweeps=max_sweeps).real))


# -- FFT ---------------------------------------------------------------------

def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_pow2(x):
    n = x.shape[-1]
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    lead = a.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(lead + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(lead + (n,))


def _bluestein(x):
    n = x.shape[-1]
    m = 1 << (2 * n - 1).bit_length()
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase exact for large k
    w = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * w
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(w)
    b[m - n + 1:] = np.conj(w[1:])[::-1]
    conv = _ifft_pow2(_fft_pow2(a) * _fft_pow2(b))
    return conv[..., :n] * w


def _ifft_pow2(X):
    return np.conj(_fft_pow2(np.conj(X))) / X.shape[-1]


def fft(x, axis: int = -1) -> np.ndarray:
    """Unnormalized forward DFT along ``axis``."""
    x = np.moveaxis(np.asarray(x), axis, -1)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("FFT length must be >= 1")
    if n & (n - 1) == 0:
        out = _fft_pow2(x)
    else:
        out = _bluestein(x.astype(np.complex128))
    return np.moveaxis(out, -1, axis)


def ifft(X, axis: int = -1) -> np.ndarray:
    X = np.asarray(X)
    return np.conj(fft(np.conj(X), axis=axis)) / X.shape[axis]


def fft2(field) -> np.ndarray:
    """Unnormalized 2-D DFT over the last two axes."""
    f = np.asarray(field)
    if f.ndim < 2 or f.shape[-1] < 1 or f.shape[-2] < 1:
        raise ValueError(f"fft2 needs a field with two extents >= 1, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("fft2 input has non-finite entries")
    return fft(fft(f, axis=-1), axis=-2)


def dft_matrix(n: int) -> np.ndarray:
    """The n x n matrix F with F @ v == fft(v), built column by column from :func:`fft`."""
    return fft(np.eye(n), axis=0)
