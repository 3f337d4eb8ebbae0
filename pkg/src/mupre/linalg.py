"""Dense linear-algebra kernels shared by the optimizers and oracles.

Everything operates on plain 2-D float64 numpy arrays ("matrices"). All
routines are pure functions of their inputs: no globals, no hidden state,
safe to call from concurrent workers. Shapes are desk-scale (<= a few
thousand), dense and real; sparse, complex and GPU paths are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Matrix = np.ndarray

# Aggressive quintic for the orthogonalization iteration. Maximizes the slope
# at zero so small singular values are pulled up quickly, at the price of
# never actually converging to 1 (it wanders in a band around 1).
NS_QUINTIC = (3.4445, -4.7750, 2.0315)

# Number of trailing iterations replaced by the convergent cubic
# X <- X (3 I - X^T X) / 2, which polishes the singular-value band onto 1.
NS_POLISH_STEPS = 2

# Guard added to the Frobenius norm in the pre-normalization step.
NS_DEFAULT_EPS = 1e-7


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce to a 2-D float64 array, rejecting bad shapes and non-finite entries."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def frob_norm(a: Matrix) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float)))


@dataclass
class EigDecomp:
    """Symmetric eigendecomposition, eigenvalues sorted descending.

    eigenvectors[:, i] is the unit eigenvector for eigenvalues[i]; the
    column set is orthonormal.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass
class PowerIterState:
    """Carried state of the online top-singular-direction estimate.

    v is a unit vector in input (column) space; sigma_hat is the most recent
    singular-value estimate |A v|.
    """

    v: np.ndarray
    sigma_hat: float = 0.0


def sym_eig(a: Matrix, sym_tol: float = 1e-10) -> EigDecomp:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Raises ValueError for non-square or asymmetric input (asymmetry measured
    against sym_tol relative to the largest entry). Non-convergence of the
    underlying LAPACK solver propagates as numpy.linalg.LinAlgError.
    """
    a = as_matrix(a, "sym_eig input")
    n, m = a.shape
    if n != m:
        raise ValueError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max())) if a.size else 1.0
    if n and float(np.abs(a - a.T).max()) > sym_tol * scale:
        raise ValueError("sym_eig input is not symmetric within tolerance")
    # Symmetrize to kill representable round-off before factorizing.
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return EigDecomp(eigenvalues=w[::-1].copy(), eigenvectors=v[:, ::-1].copy())


def mat_inv_power(a: Matrix, e: float, eps: float, neg_tol: float = 1e-6) -> Matrix:
    """(A + eps I)^(-e) for symmetric PSD A via eigendecomposition.

    Eigenvalues that are slightly negative from accumulated round-off are
    clamped to 0 before the inverse power; anything below -neg_tol * lambda_max
    means the accumulator was corrupted and raises. e == 0 returns the exact
    identity. eps == 0 with a clamped zero eigenvalue and e > 0 is singular.
    """
    if e < 0:
        raise ValueError(f"mat_inv_power exponent must be >= 0, got {e}")
    a = as_matrix(a, "mat_inv_power input")
    if e == 0:
        return np.eye(a.shape[0])
    dec = sym_eig(a)
    lam = dec.eigenvalues
    lam_max = float(lam[0]) if lam.size else 0.0
    if lam.size and float(lam[-1]) < -neg_tol * max(abs(lam_max), 1e-300):
        raise ValueError(
            f"mat_inv_power input is not PSD (min eigenvalue {lam[-1]:.3e})"
        )
    lam = np.maximum(lam, 0.0)
    if eps == 0.0 and lam.size and lam[-1] == 0.0:
        raise ValueError("mat_inv_power is singular: zero eigenvalue with eps=0")
    powered = (lam + eps) ** (-e)
    v = dec.eigenvectors
    return (v * powered) @ v.T


def newton_schulz(m: Matrix, iters: int = 5, eps: float = NS_DEFAULT_EPS) -> Matrix:
    """Approximate msign(M) = U V^T from the reduced SVD M = U S V^T.

    The input is pre-normalized by its Frobenius norm (+ eps); wide inputs
    are transposed so the Gram matrix in the iteration stays at the smaller
    dimension. The leading iterations use the aggressive quintic; the final
    NS_POLISH_STEPS use the convergent cubic so generic nonzero singular
    values land near 1 instead of oscillating in the quintic's band.
    An all-zero input returns the zero matrix.
    """
    if iters < 1:
        raise ValueError(f"newton_schulz needs iters >= 1, got {iters}")
    m = as_matrix(m, "newton_schulz input")
    fro = float(np.linalg.norm(m))
    if fro == 0.0:
        return np.zeros_like(m)
    x = m / (fro + eps)
    transposed = x.shape[0] < x.shape[1]
    if transposed:
        x = x.T
    a, b, c = NS_QUINTIC
    polish_from = max(iters - NS_POLISH_STEPS, 1) if iters > NS_POLISH_STEPS else iters
    for k in range(iters):
        g = x.T @ x
        if k < polish_from:
            x = a * x + x @ (b * g + c * (g @ g))
        else:
            x = 1.5 * x - 0.5 * (x @ g)
    return x.T if transposed else x


def power_iter_step(a: Matrix, state: PowerIterState, eps: float = 1e-8) -> PowerIterState:
    """One online power-iteration step for the top singular pair of A.

    sigma_hat is estimated from the incoming direction as |A v|; the new
    direction is A^T A v renormalized. The direction update is skipped when
    renormalizing would produce a vector of norm below 0.5, i.e. when
    |A^T y| < eps; this keeps v a stale-but-valid unit vector for sparse or
    vanishing updates instead of amplifying noise.
    """
    a = as_matrix(a, "power_iter input")
    v = np.asarray(state.v, dtype=float).reshape(-1)
    if v.shape[0] != a.shape[1]:
        raise ValueError(
            f"power_iter state dimension {v.shape[0]} does not match matrix {a.shape}"
        )
    y = a @ v
    sigma_hat = float(np.linalg.norm(y))
    z = a.T @ y
    norm_z = float(np.linalg.norm(z))
    if norm_z / (norm_z + eps) < 0.5:
        new_v = v
    else:
        new_v = z / norm_z
    return PowerIterState(v=new_v, sigma_hat=sigma_hat)


def random_unit_vector(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm start vector for power iteration."""
    v = rng.standard_normal(n)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:  # astronomically unlikely; retry deterministically
        v = np.ones(n)
        norm = float(np.linalg.norm(v))
    return v / norm


def spectral_norm_exact(a: Matrix) -> float:
    """Largest singular value via the smaller Gram matrix's top eigenvalue."""
    a = as_matrix(a, "spectral_norm input")
    if a.shape[0] <= a.shape[1]:
        gram = a @ a.T
    else:
        gram = a.T @ a
    lam = sym_eig(gram).eigenvalues
    top = float(lam[0]) if lam.size else 0.0
    return float(np.sqrt(max(top, 0.0)))


def stable_rank(a: Matrix) -> float:
    """|A|_F^2 / |A|_2^2; always within [1, min(shape)] up to round-off."""
    a = as_matrix(a, "stable_rank input")
    fro2 = float(np.sum(a * a))
    if fro2 == 0.0:
        raise ValueError("stable_rank is undefined for the zero matrix")
    spec = spectral_norm_exact(a)
    return fro2 / (spec * spec)
