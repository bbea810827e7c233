"""Sparse symmetric algebra for intrinsic CAR priors.

Everything here works on block-diagonal (one block per connected component)
precision matrices of the form ``tau * K + diag(d)`` where ``K = D - W`` is
the graph Laplacian of the lattice.  Factorizations use a reverse
Cuthill-McKee ordering followed by a LAPACK banded Cholesky, which is exact
and cheap for lattice-like graphs whose bandwidth stays small.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.linalg.lapack import dpbtrf, dpbtrs, dtbtrs
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee

LOG_2PI = float(np.log(2.0 * np.pi))


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization meets a non-positive pivot."""

    def __init__(self, index: int):
        super().__init__(f"matrix is not positive definite (pivot at index {index})")
        self.index = index


class ConstraintViolation(ValueError):
    pass


class SparseSymmetricMatrix:
    """Symmetric matrix stored as its upper triangle in coordinate form."""

    def __init__(self, n: int, rows, cols, values):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if not (rows.shape == cols.shape == values.shape):
            raise ValueError("rows, cols and values must have equal length")
        if np.any(rows > cols):
            raise ValueError("entries must satisfy row <= col")
        if rows.size and (rows.min() < 0 or cols.max() >= n):
            raise ValueError("entry index out of range")
        if not np.all(np.isfinite(values)):
            raise ValueError("matrix entries must be finite")
        key = rows * n + cols
        if np.unique(key).size != key.size:
            raise ValueError("duplicate (row, col) entries")
        order = np.lexsort((cols, rows))
        self.n = int(n)
        self.rows = rows[order]
        self.cols = cols[order]
        self.values = values[order]

    @classmethod
    def from_scipy(cls, mat) -> "SparseSymmetricMatrix":
        upper = sp.triu(sp.csr_matrix(mat)).tocoo()
        upper.sum_duplicates()
        return cls(mat.shape[0], upper.row, upper.col, upper.data)

    @classmethod
    def from_dense(cls, arr) -> "SparseSymmetricMatrix":
        arr = np.asarray(arr, dtype=float)
        if not np.allclose(arr, arr.T, rtol=0, atol=0):
            raise ValueError("matrix is not symmetric")
        return cls.from_scipy(sp.csr_matrix(arr))

    @cached_property
    def csr(self) -> sp.csr_matrix:
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.values, self.values[off]])
        return sp.csr_matrix((v, (r, c)), shape=(self.n, self.n))

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def diagonal(self) -> np.ndarray:
        return self.csr.diagonal()

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def matvec(self, v) -> np.ndarray:
        return self.csr @ np.asarray(v, dtype=float)

    def write_matrix_market(self, path) -> None:
        mmwrite(str(path), self.csr.tocoo(), symmetry="symmetric")


def _as_csr(Q) -> sp.csr_matrix:
    if isinstance(Q, SparseSymmetricMatrix):
        return Q.csr
    return sp.csr_matrix(Q)


class BandedPattern:
    """Fill-reducing ordering and band layout for a fixed sparsity pattern."""

    def __init__(self, pattern):
        A = _as_csr(pattern)
        n = A.shape[0]
        self.n = n
        if n == 0:
            self.perm = np.zeros(0, dtype=np.int64)
            self.iperm = self.perm
            self.u = 0
            return
        A = (A + sp.eye(n, format="csr")).tocsr()
        self.perm = np.asarray(reverse_cuthill_mckee(A, symmetric_mode=True), dtype=np.int64)
        self.iperm = np.empty_like(self.perm)
        self.iperm[self.perm] = np.arange(n)
        coo = A.tocoo()
        pi, pj = self.iperm[coo.row], self.iperm[coo.col]
        self.u = int(np.max(np.abs(pi - pj))) if coo.nnz else 0

    def to_band(self, Q) -> np.ndarray:
        """Upper LAPACK band storage of ``Q`` in permuted order."""
        coo = sp.triu(_as_csr(Q)[self.perm][:, self.perm]).tocoo()
        if coo.nnz and np.max(coo.col - coo.row) > self.u:
            raise ValueError("matrix has entries outside the factorization pattern")
        ab = np.zeros((self.u + 1, self.n))
        np.add.at(ab, (self.u + coo.row - coo.col, coo.col), coo.data)
        return ab

    def factor_band(self, ab: np.ndarray) -> "CholeskyFactor":
        return CholeskyFactor(self, ab)

    def factor(self, Q, jitter: float = 0.0) -> "CholeskyFactor":
        ab = self.to_band(Q)
        if jitter:
            ab[self.u] += jitter
        return CholeskyFactor(self, ab)


class CholeskyFactor:
    """``Q = U^T U`` with ``U`` upper banded, in the pattern's permuted order."""

    def __init__(self, pattern: BandedPattern, ab: np.ndarray):
        self.pattern = pattern
        if pattern.n == 0:
            self.cb = ab
            return
        cb, info = dpbtrf(ab, lower=0)
        if info > 0:
            raise NotPositiveDefiniteError(int(pattern.perm[info - 1]))
        if info < 0:
            raise ValueError(f"dpbtrf: illegal argument {-info}")
        self.cb = cb

    @property
    def n(self) -> int:
        return self.pattern.n

    def logdet(self) -> float:
        if self.n == 0:
            return 0.0
        return 2.0 * float(np.sum(np.log(self.cb[self.pattern.u])))

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return b.copy()
        p = self.pattern
        xp, info = dpbtrs(self.cb, b[p.perm], lower=0)
        if info != 0:
            raise ValueError(f"dpbtrs failed with info={info}")
        return xp[p.iperm]

    def sample_zero_mean(self, z) -> np.ndarray:
        """Map standard normals ``z`` to a draw with precision ``Q``."""
        z = np.asarray(z, dtype=float)
        if self.n == 0:
            return z.copy()
        p = self.pattern
        xp, info = dtbtrs(self.cb, z, uplo="U", trans="N")
        if info != 0:
            raise ValueError(f"dtbtrs failed with info={info}")
        return xp[p.iperm]

    def quad(self, v) -> float:
        """``v^T Q v`` through the factor."""
        v = np.asarray(v, dtype=float)
        if self.n == 0:
            return 0.0
        p = self.pattern
        # U v in band storage: row i of U holds cb[u + i - j, j] for j >= i.
        vp = v[p.perm]
        u = p.u
        n = self.n
        uv = np.zeros(n)
        for k in range(u + 1):
            # diagonal offset k: U[i, i+k] = cb[u - k, i + k]
            uv[: n - k] += self.cb[u - k, k:] * vp[k:]
        return float(uv @ uv)


def solve_spd(Q, b, jitter: float = 0.0) -> np.ndarray:
    """Solve ``Q x = b`` for symmetric positive definite sparse ``Q``.

    Raises NotPositiveDefiniteError (carrying the offending index) when the
    factorization breaks down.  ``jitter`` is added to the diagonal; the
    default adds nothing.
    """
    Q = _as_csr(Q)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != Q.shape[0]:
        raise ValueError("dimension mismatch between Q and b")
    return BandedPattern(Q).factor(Q, jitter=jitter).solve(b)


@dataclass(eq=False)
class IcarStructure:
    """Structure matrix ``K = D - W`` of an ICAR prior plus component metadata."""

    K: SparseSymmetricMatrix
    component_label: np.ndarray
    n_components: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.K.n

    @property
    def rank(self) -> int:
        return self.n - self.n_components

    @cached_property
    def component_sizes(self) -> np.ndarray:
        return np.bincount(self.component_label, minlength=self.n_components)

    @cached_property
    def pinned_nodes(self) -> np.ndarray:
        """Highest index of every component; used to remove the null space."""
        last = np.full(self.n_components, -1, dtype=np.int64)
        np.maximum.at(last, self.component_label, np.arange(self.n))
        return last

    @cached_property
    def logdet_plus(self) -> float:
        """Sum of logs of the ``n - k`` positive eigenvalues of K.

        By the matrix-tree theorem the pseudo-determinant of a connected
        Laplacian equals ``n_c`` times any principal cofactor, so a sparse
        Cholesky of K with one node removed per component suffices.
        """
        keep = np.setdiff1d(np.arange(self.n), self.pinned_nodes)
        K_red = self.K.csr[keep][:, keep]
        logdet = BandedPattern(K_red).factor(K_red).logdet() if keep.size else 0.0
        return float(logdet + np.sum(np.log(self.component_sizes)))

    def center(self, v) -> np.ndarray:
        """Subtract per-component means."""
        v = np.asarray(v, dtype=float)
        means = np.bincount(self.component_label, weights=v, minlength=self.n_components)
        return v - (means / self.component_sizes)[self.component_label]

    def component_sums(self, v) -> np.ndarray:
        return np.bincount(self.component_label, weights=np.asarray(v, dtype=float),
                           minlength=self.n_components)

    def check_constraint(self, v, tol: float = 1e-8) -> None:
        sums = self.component_sums(v)
        worst = int(np.argmax(np.abs(sums))) if sums.size else 0
        if sums.size and abs(sums[worst]) > tol:
            raise ConstraintViolation(
                f"sum-to-zero constraint violated on component {worst} (sum={sums[worst]:.3e})"
            )


def icar_structure(network) -> IcarStructure:
    """Build ``K = D - W`` from a SegmentNetwork (or anything with ``n`` and ``edges``)."""
    n = int(network.n)
    edges = np.asarray(network.edges, dtype=np.int64).reshape(-1, 2)
    if n < 2:
        raise ValueError("ICAR structure needs at least 2 sites")
    deg = np.bincount(edges.ravel(), minlength=n).astype(float)
    isolated = np.flatnonzero(deg == 0)
    if isolated.size:
        raise ValueError(
            f"site {int(isolated[0])} has no neighbours; prune isolated components first"
        )
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    rows = np.concatenate([np.arange(n), lo])
    cols = np.concatenate([np.arange(n), hi])
    vals = np.concatenate([deg, -np.ones(len(lo))])
    K = SparseSymmetricMatrix(n, rows, cols, vals)
    k, labels = connected_components(K.csr, directed=False)
    return IcarStructure(K=K, component_label=labels.astype(np.int64), n_components=int(k))


def quad_form(K, v) -> float:
    """``v^T K v``."""
    csr = _as_csr(K)
    v = np.asarray(v, dtype=float)
    if v.shape != (csr.shape[0],):
        raise ValueError(f"dimension mismatch: matrix is {csr.shape[0]}, vector is {v.shape}")
    return float(v @ (csr @ v))


def icar_logdensity(theta, tau: float, S: IcarStructure, check: bool = True) -> float:
    """Log density of the sum-to-zero constrained ICAR law with precision ``tau * K``."""
    theta = np.asarray(theta, dtype=float)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if check:
        S.check_constraint(theta)
    r = S.rank
    return (0.5 * r * np.log(tau) + 0.5 * S.logdet_plus - 0.5 * tau * quad_form(S.K, theta)
            - 0.5 * r * LOG_2PI)


class ConstrainedGaussian:
    """Gaussian ``exp(-x'Qx/2 + b'x)`` restricted to per-component sum-to-zero.

    ``Q = tau * K + diag(d)`` is block-diagonal over components.  Components
    where ``d`` vanishes are intrinsic: they are handled by pinning one node
    (the law is invariant to per-component shifts once ``b`` is centred) and
    projecting.  The others are proper and are conditioned by kriging.
    Densities are with respect to Lebesgue measure on the constraint
    subspace, so forward and reverse proposal densities are comparable.
    """

    def __init__(self, S: IcarStructure, tau: float, d=None, b=None):
        n = S.n
        d = np.zeros(n) if d is None else np.asarray(d, dtype=float)
        b = np.zeros(n) if b is None else np.asarray(b, dtype=float)
        self.S = S
        labels = S.component_label
        dsum = np.bincount(labels, weights=np.abs(d), minlength=S.n_components)
        self.singular = dsum == 0.0
        if np.any(self.singular):
            # shift-invariance needs a centred linear term on intrinsic components
            bc = S.center(b)
            sing_site = self.singular[labels]
            b = np.where(sing_site, bc, b)
        key = tuple(np.flatnonzero(self.singular))
        tmpl = S._cache.get(("band", key))
        if tmpl is None:
            pinned = S.pinned_nodes[list(key)] if key else np.zeros(0, dtype=np.int64)
            keep = np.setdiff1d(np.arange(n), pinned)
            K_red = S.K.csr[keep][:, keep]
            pattern = BandedPattern(K_red)
            Kband = pattern.to_band(K_red)
            tmpl = (keep, pattern, Kband)
            S._cache[("band", key)] = tmpl
        keep, pattern, Kband = tmpl
        self.keep = keep
        ab = tau * Kband
        ab[pattern.u] += d[keep][pattern.perm]
        self.factor = pattern.factor_band(ab)
        self.b = b
        self.mean_red = self.factor.solve(b[keep])
        # kriging terms for proper components
        self.proper = np.flatnonzero(~self.singular)
        lab_keep = labels[keep]
        if self.proper.size:
            A = np.zeros((keep.size, self.proper.size))
            for j, c in enumerate(self.proper):
                A[lab_keep == c, j] = 1.0
            self.A = A
            self.V = np.column_stack([self.factor.solve(A[:, j]) for j in range(A.shape[1])])
            # A^T Q^{-1} A is diagonal because Q is block-diagonal over components
            self.AV = np.einsum("ij,ij->j", A, self.V)
        self.lab_keep = lab_keep

    def _finish(self, z_red: np.ndarray) -> np.ndarray:
        n = self.S.n
        if self.proper.size:
            s = self.A.T @ z_red
            z_red = z_red - self.V @ (s / self.AV)
        x = np.zeros(n)
        x[self.keep] = z_red
        if np.any(self.singular):
            sing_site = self.singular[self.S.component_label]
            x = np.where(sing_site, self.S.center(x), x)
        return x

    @property
    def mean(self) -> np.ndarray:
        return self._finish(self.mean_red.copy())

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.keep.size)
        return self._finish(self.mean_red + self.factor.sample_zero_mean(z))

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float)
        S = self.S
        labels = S.component_label
        z = x.copy()
        if np.any(self.singular):
            sing_site = self.singular[labels]
            shift = x[S.pinned_nodes][labels]
            z = np.where(sing_site, x - shift, x)
        diff = z[self.keep] - self.mean_red
        m = self.keep.size
        lp = -0.5 * self.factor.quad(diff) + 0.5 * self.factor.logdet() - 0.5 * m * LOG_2PI
        if self.proper.size:
            cm = self.A.T @ self.mean_red
            lp -= np.sum(-0.5 * cm**2 / self.AV - 0.5 * np.log(self.AV) - 0.5 * LOG_2PI)
        # pinning Jacobian (+) on intrinsic components, hyperplane surface factor (-) on proper ones
        logn = np.log(S.component_sizes)
        lp += 0.5 * float(np.sum(np.where(self.singular, logn, -logn)))
        return float(lp)


def sample_constrained(S: IcarStructure, tau: float, rng) -> np.ndarray:
    """One draw from the ICAR law with precision ``tau * K`` under sum-to-zero."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    rng = np.random.default_rng(rng)
    return ConstrainedGaussian(S, tau).sample(rng)
