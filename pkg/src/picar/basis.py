"""Moran's-operator basis, prior precision kernels and competing bases."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import SingularKernelError
from .lanczos import thick_restart_lanczos

DENSE_CAP = 2000
EIGEN_BUFFER = 10
PRECISION_KINDS = ("ind", "icar", "car")


class MoranOperator:
    """The centred adjacency operator ``P N P`` with ``P = I - 11'/m``.

    Applied matrix-free: two centring passes and one sparse product.
    """

    def __init__(self, N):
        N = sp.csr_matrix(N, dtype=float)
        if N.shape[0] != N.shape[1]:
            raise ValueError("adjacency must be square")
        self.N = N
        self.m = N.shape[0]
        self.shape = (self.m, self.m)

    @staticmethod
    def _centre(v):
        return v - v.mean(axis=0, keepdims=True)

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        return self._centre(self.N @ self._centre(v))

    __matmul__ = matvec

    def todense(self):
        if self.m > DENSE_CAP:
            raise MemoryError(f"dense materialisation capped at m={DENSE_CAP}")
        return parallel_moran_blocks(self.N, 1)


def moran_operator(N) -> MoranOperator:
    return MoranOperator(N)


def _moran_block(Sigma_rows):
    return Sigma_rows - Sigma_rows.mean(axis=1, keepdims=True)


def parallel_moran_blocks(N, n_blocks: int = 1, n_workers: int | None = None) -> np.ndarray:
    """Dense Moran's operator assembled from independent row blocks.

    ``Sigma = (I - 11'/m) N`` is split into ``n_blocks`` row blocks and each
    block is right-multiplied by the centring matrix on its own; the blocks
    are then stacked.  Row results do not depend on the partition.
    """
    N = sp.csr_matrix(N, dtype=float)
    m = N.shape[0]
    if m > DENSE_CAP:
        raise MemoryError(f"dense materialisation capped at m={DENSE_CAP}")
    if not 1 <= n_blocks <= m:
        raise ValueError("need 1 <= n_blocks <= m")
    Nd = N.toarray()
    Sigma = Nd - Nd.mean(axis=0, keepdims=True)
    bounds = np.linspace(0, m, n_blocks + 1).astype(int)
    blocks = [Sigma[bounds[i]:bounds[i + 1]] for i in range(n_blocks)]
    if n_blocks == 1 or n_workers == 1:
        parts = [_moran_block(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(_moran_block, blocks))
    return np.vstack(parts)


@dataclass
class MoranBasis:
    """Leading positive eigenpairs of the Moran's operator.

    Attributes
    ----------
    vectors : ndarray of shape (m, p)
        Orthonormal columns.
    values : ndarray of shape (p,)
        Strictly positive, non-increasing.
    n_requested : int
    """

    vectors: np.ndarray
    values: np.ndarray
    n_requested: int = 0

    @property
    def rank(self) -> int:
        return self.vectors.shape[1]

    def truncate(self, p: int) -> "MoranBasis":
        if p > self.rank:
            raise ValueError(f"requested rank {p} exceeds available {self.rank}")
        return MoranBasis(self.vectors[:, :p], self.values[:p], self.n_requested)

    def save(self, path) -> None:
        save_basis(self, path)


def _canonical_signs(vectors):
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        big = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())
        if big.size and col[big[0]] < 0:
            out[:, j] = -col
    return out


def leading_eigenpairs(op: MoranOperator, p_max: int, *, method: str = "auto",
                       seed: int = 0, tol: float = 1e-12,
                       buffer: int = EIGEN_BUFFER) -> MoranBasis:
    """Leading positive eigenpairs of the Moran's operator.

    ``p_max + buffer`` pairs are computed and the first ``p_max`` kept; of
    those only strictly positive eigenvalues are retained.

    Parameters
    ----------
    op : MoranOperator
    p_max : int
    method : {"auto", "lanczos", "dense"}
        ``auto`` uses a dense symmetric solver for ``m <= 2000``.
    seed : int
        Seed of the Lanczos starting vector.
    """
    m = op.m
    if not 1 <= p_max < m:
        raise ValueError(f"need 1 <= p_max < m, got p_max={p_max}, m={m}")
    if method == "auto":
        method = "dense" if m <= DENSE_CAP else "lanczos"
    n_want = min(p_max + buffer, m - 2)
    n_want = max(n_want, p_max)
    if method == "dense":
        vals, vecs = sla.eigh(op.todense(), subset_by_index=[m - n_want, m - 1])
        vals, vecs = vals[::-1], vecs[:, ::-1]
    elif method == "lanczos":
        ones = np.full((m, 1), 1.0 / np.sqrt(m))
        vals, vecs = thick_restart_lanczos(op.matvec, m, n_want, seed=seed, tol=tol,
                                           deflate=ones)
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    vals, vecs = vals[:p_max], vecs[:, :p_max]
    positive = vals > 1e-10 * max(abs(vals[0]), 1e-300)
    vecs = _canonical_signs(vecs[:, positive])
    return MoranBasis(np.ascontiguousarray(vecs), vals[positive].copy(), p_max)


def moran_basis(N, p_max: int, **kwargs) -> MoranBasis:
    """Shorthand for ``leading_eigenpairs(moran_operator(N), p_max)``."""
    return leading_eigenpairs(moran_operator(N), p_max, **kwargs)


# ---------------------------------------------------------------------------
# Prior precision kernels
# ---------------------------------------------------------------------------


@dataclass
class PrecisionKernel:
    """Prior precision ``Q`` on the mesh nodes and its reduction ``K = M'QM``.

    ``chol`` is the lower Cholesky factor of ``K``.
    """

    kind: str
    Q: sp.spmatrix
    K: np.ndarray
    chol: np.ndarray
    rho: float | None = None

    @property
    def is_identity(self) -> bool:
        return self.kind == "ind"

    def quad(self, delta) -> float:
        """``delta' K delta``."""
        if self.is_identity:
            return float(delta @ delta)
        return float(delta @ (self.K @ delta))


def precision_matrix(kind: str, N, rho: float = 0.5) -> sp.csr_matrix:
    """Node-level precision: identity, ICAR ``D - N`` or CAR ``D - rho N``."""
    N = sp.csr_matrix(N, dtype=float)
    m = N.shape[0]
    if kind == "ind":
        return sp.identity(m, format="csr")
    deg = np.asarray(N.sum(axis=1)).ravel()
    if kind == "icar":
        return (sp.diags(deg) - N).tocsr()
    if kind == "car":
        if not 0.0 < rho < 1.0:
            raise ValueError(f"CAR rho must lie in (0, 1), got {rho}")
        return (sp.diags(deg) - rho * N).tocsr()
    raise ValueError(f"unknown precision kind {kind!r}; choose from {PRECISION_KINDS}")


def precision_kernel(kind: str, N, basis, rho: float = 0.5) -> PrecisionKernel:
    """Reduced prior precision ``K = M'QM`` with its Cholesky factor.

    Raises
    ------
    SingularKernelError
        If ``K`` is not positive definite.
    """
    M = basis.vectors if isinstance(basis, MoranBasis) else np.asarray(basis)
    Q = precision_matrix(kind, N, rho)
    p = M.shape[1]
    if kind == "ind":
        gram = M.T @ M
        if np.abs(gram - np.eye(p)).max() > 1e-10:
            raise SingularKernelError("basis columns are not orthonormal; M'M != I")
        K = np.eye(p)
    else:
        K = M.T @ (Q @ M)
        K = 0.5 * (K + K.T)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise SingularKernelError(
            f"M'QM ({kind}) is not positive definite; rank {p} may be too large "
            "or the mesh graph disconnected") from None
    return PrecisionKernel(kind, Q, K, L, rho if kind == "car" else None)


def identity_kernel(p: int) -> PrecisionKernel:
    """Identity kernel for bases without a node graph."""
    I = np.eye(p)
    return PrecisionKernel("ind", sp.identity(p, format="csr"), I, I.copy())


# ---------------------------------------------------------------------------
# Alternative bases
# ---------------------------------------------------------------------------


def _distances(locations, knots):
    s = np.asarray(locations, dtype=float).reshape(-1, 2)
    c = np.asarray(knots, dtype=float).reshape(-1, 2)
    if c.shape[0] == 0:
        raise ValueError("knots must be non-empty")
    return np.sqrt(((s[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1))


def knot_grid(n_knots: int, box=(0.0, 1.0, 0.0, 1.0)) -> np.ndarray:
    """Evenly spaced square grid of ``n_knots`` (a perfect square) knots."""
    side = int(round(np.sqrt(n_knots)))
    if side * side != n_knots:
        raise ValueError("n_knots must be a perfect square")
    xmin, xmax, ymin, ymax = box
    hx = (xmax - xmin) / side
    hy = (ymax - ymin) / side
    gx = xmin + hx * (np.arange(side) + 0.5)
    gy = ymin + hy * (np.arange(side) + 0.5)
    X, Y = np.meshgrid(gx, gy)
    return np.column_stack([X.ravel(), Y.ravel()])


def bisquare_basis(locations, knots, omega: float) -> np.ndarray:
    """Compactly supported bi-square functions ``(1 - (d/omega)^2)^2`` for ``d < omega``."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    d = _distances(locations, knots)
    return np.where(d < omega, (1.0 - (d / omega) ** 2) ** 2, 0.0)


def thin_plate_basis(locations, knots) -> np.ndarray:
    """Thin-plate spline functions ``d^2 log d`` (zero at ``d = 0``)."""
    d = _distances(locations, knots)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = d * d * np.log(d)
    out[d == 0] = 0.0
    return out


def matern_eigenbasis(nodes, sigma2: float, phi: float, nu: float, p: int):
    """Leading ``p`` eigenpairs of the Matérn covariance over ``nodes``.

    Returns
    -------
    MoranBasis
        Container reused for any orthonormal node basis.
    """
    from .randfield import MaternParams, matern_matrix

    C = matern_matrix(np.asarray(nodes, dtype=float), MaternParams(sigma2, phi, nu))
    m = C.shape[0]
    vals, vecs = sla.eigh(C, subset_by_index=[m - p, m - 1])
    vals, vecs = vals[::-1], _canonical_signs(vecs[:, ::-1])
    return MoranBasis(np.ascontiguousarray(vecs), vals, p)


# ---------------------------------------------------------------------------
# Plain-text IO
# ---------------------------------------------------------------------------


def save_basis(basis: MoranBasis, path) -> None:
    """Header ``m p``, ``m`` rows of ``p`` entries, then the eigenvalues."""
    m, p = basis.vectors.shape
    with open(path, "w") as fh:
        fh.write(f"{m} {p}\n")
        for row in basis.vectors:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write(" ".join(repr(float(v)) for v in basis.values) + "\n")


def load_basis(path) -> MoranBasis:
    with open(path) as fh:
        m, p = (int(v) for v in fh.readline().split())
        M = np.array([[float(v) for v in fh.readline().split()] for _ in range(m)])
        vals = np.array([float(v) for v in fh.readline().split()])
    return MoranBasis(M.reshape(m, p), vals, p)
