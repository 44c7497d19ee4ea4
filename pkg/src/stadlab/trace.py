"""Randomized and exact trace estimation over matrix-vector-product operators.

All estimators see the matrix only through a :class:`MatVecOperator`, so the
same code paths serve dense test matrices and Jacobian-vector products of
neural vector fields. Matrix-vector products are counted exactly: the plain
probe average costs ``n`` products, the deflated estimator ``3n`` (``2n``
when its sketch basis is reused), the leave-one-out estimator ``2n``, and
the exact trace ``D``.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import solve_triangular

from ._rng import child_rng


class NonFiniteOperator(RuntimeError):
    """The operator returned NaN or Inf for a finite input vector."""


class DimensionMismatch(ValueError):
    """Probe vectors and operator have incompatible dimensions."""


@dataclass
class ProbeSpec:
    """How to draw probe vectors: distribution, count, and seed."""

    kind: str = "rademacher"  # rademacher | gaussian
    count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("rademacher", "gaussian"):
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("probe count must be >= 1")


@dataclass
class TraceEstimate:
    """Result of a single trace-estimation call."""

    value: float
    matvecs_used: int
    estimator: str  # exact | hutchinson | hutchpp | xtrace
    effective_rank: Optional[int] = None


class MatVecOperator:
    """A square linear map exposed only through matrix-vector products.

    Parameters
    ----------
    dim : int
        Side length D of the (implicit) square matrix.
    apply : callable
        Maps a length-D vector to a length-D vector. Must be linear.

    Notes
    -----
    The product counter is an instance attribute; estimators that must run
    concurrently should each wrap their own operator instance.
    """

    def __init__(self, dim: int, apply: Callable[[np.ndarray], np.ndarray]):
        if dim < 1:
            raise ValueError("operator dimension must be >= 1")
        self.dim = int(dim)
        self._apply = apply
        self.matvec_counter = 0

    def apply(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"expected vector of shape ({self.dim},), got {vec.shape}")
        self.matvec_counter += 1
        return np.asarray(self._apply(vec), dtype=float)

    def apply_columns(self, mat: np.ndarray) -> np.ndarray:
        """Apply to each column of a (D, k) matrix; counts k products."""
        mat = np.asarray(mat, dtype=float)
        if mat.shape[0] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} rows, got {mat.shape[0]}")
        return np.column_stack([self.apply(mat[:, j]) for j in range(mat.shape[1])])

    @classmethod
    def from_matrix(cls, A: np.ndarray) -> "MatVecOperator":
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("from_matrix expects a square 2-D array")
        return cls(A.shape[0], lambda v: A @ v)


def draw_probes(kind: str, dim: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a (dim, count) probe matrix with unit-variance entries."""
    if kind == "rademacher":
        return rng.integers(0, 2, size=(dim, count)).astype(float) * 2.0 - 1.0
    if kind == "gaussian":
        return rng.standard_normal((dim, count))
    raise ValueError(f"unknown probe kind {kind!r}")


def _resolve_probes(op: MatVecOperator, probes, estimator: str, trial: int) -> np.ndarray:
    """Accept either a ProbeSpec (drawn here) or an explicit (D, n) matrix."""
    if isinstance(probes, ProbeSpec):
        rng = child_rng(probes.seed, estimator, trial)
        return draw_probes(probes.kind, op.dim, probes.count, rng)
    P = np.asarray(probes, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] != op.dim:
        raise DimensionMismatch(f"probes have {P.shape[0]} rows, operator dim is {op.dim}")
    return P


def exact_trace(op: MatVecOperator) -> TraceEstimate:
    """Exact trace via D basis-vector products.

    Returns
    -------
    TraceEstimate
        ``value`` is the sum of diagonal entries e_i . apply(e_i);
        ``matvecs_used`` equals D.
    """
    total = 0.0
    for i in range(op.dim):
        e = np.zeros(op.dim)
        e[i] = 1.0
        col = op.apply(e)
        if not np.all(np.isfinite(col)):
            raise NonFiniteOperator(f"operator produced non-finite output at basis vector {i}")
        total += col[i]
    return TraceEstimate(value=float(total), matvecs_used=op.dim, estimator="exact")


def hutchinson_trace(op: MatVecOperator, probes: Union[ProbeSpec, np.ndarray], trial: int = 0) -> TraceEstimate:
    """Plain probe-average trace estimate, (1/n) sum_k n_k . A n_k.

    Unbiased over the probe distribution; costs one matrix-vector product
    per probe.
    """
    P = _resolve_probes(op, probes, "hutchinson", trial)
    n = P.shape[1]
    before = op.matvec_counter
    quad = np.array([P[:, k] @ op.apply(P[:, k]) for k in range(n)])
    used = op.matvec_counter - before
    return TraceEstimate(value=float(quad.mean()), matvecs_used=used, estimator="hutchinson")


def _full_rank_sign_columns(P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Resample sign-pattern columns until the block has full column rank.

    At tiny D random sign patterns are linearly dependent with noticeable
    probability, which makes the sketch rank-deficient even for full-rank
    operators. Costs no matrix-vector products; needs n <= D.
    """
    D, n = P.shape
    basis = np.zeros((D, 0))
    for j in range(n):
        for _ in range(1000):
            col = P[:, j]
            resid = col - basis @ (basis.T @ col)
            rnorm = np.linalg.norm(resid)
            if rnorm > 1e-8 * np.sqrt(D):
                basis = np.column_stack([basis, resid / rnorm])
                break
            P[:, j] = rng.integers(0, 2, size=D).astype(float) * 2.0 - 1.0
    return P


def _orthonormalize_sketch(Y: np.ndarray):
    """QR of the sketch, dropping numerically zero columns first.

    Random sign-pattern sketches can collide at tiny D and produce zero
    columns; we orthonormalize what is left rather than fail.
    """
    norms = np.linalg.norm(Y, axis=0)
    keep = norms > 1e-12 * max(1.0, norms.max(initial=0.0))
    Yk = Y[:, keep]
    if Yk.shape[1] == 0:
        return np.zeros((Y.shape[0], 0)), 0
    Q, _ = np.linalg.qr(Yk, mode="reduced")
    # LAPACK Householder QR; guard the orthonormality contract anyway.
    assert np.allclose(Q.T @ Q, np.eye(Q.shape[1]), atol=1e-10)
    return Q, Q.shape[1]


def hutchpp_trace(
    op: MatVecOperator,
    probes: ProbeSpec,
    trial: int = 0,
    cached_basis: Optional[np.ndarray] = None,
):
    """Deflated trace estimate: low-rank sketch plus probe-averaged residual.

    Computes Tr(Q^T A Q) + (1/n) Tr(G^T (I - QQ^T) A (I - QQ^T) G) where Q
    is an orthonormal basis for the sketch A S and S, G are independent
    sign-pattern probe blocks. Exact (to rounding) on matrices of rank <= n.

    Parameters
    ----------
    cached_basis : ndarray, optional
        A previously returned Q. When supplied the sketch step is skipped,
        reducing the cost from 3n to 2n products.

    Returns
    -------
    (TraceEstimate, ndarray)
        The estimate and the basis Q for reuse by later calls.
    """
    if not isinstance(probes, ProbeSpec):
        raise TypeError("hutchpp_trace requires a ProbeSpec")
    n = probes.count
    if n > op.dim:
        raise DimensionMismatch(f"n={n} probes exceed operator dim {op.dim}")
    rng = child_rng(probes.seed, "hutchpp", trial)
    if cached_basis is not None:
        Q = np.asarray(cached_basis, dtype=float)
        if Q.shape[0] != op.dim:
            raise DimensionMismatch("cached basis has wrong row count")
        assert np.allclose(Q.T @ Q, np.eye(Q.shape[1]), atol=1e-10)
        S = None
    else:
        S = draw_probes(probes.kind, op.dim, n, rng)
        if probes.kind == "rademacher":
            S = _full_rank_sign_columns(S, rng)
        Q = None
    rng_g = child_rng(probes.seed, "hutchpp-res", trial)
    G = draw_probes(probes.kind, op.dim, n, rng_g)
    return hutchpp_core(op, S, G, cached_basis=Q)


def xtrace(op: MatVecOperator, probes: ProbeSpec, trial: int = 0) -> TraceEstimate:
    """Leave-one-out deflated trace estimate, averaged over n sub-estimators.

    Builds a sketch Q R = A Omega from n sign-pattern probes, applies A to Q,
    and combines Q^T A Q with rows/columns of R^{-1}, Q^T Omega and
    (A Q)^T Omega so that each of the n sub-estimators deflates against the
    basis spanned by the other n-1 probes. Costs 2n products.
    """
    if not isinstance(probes, ProbeSpec):
        raise TypeError("xtrace requires a ProbeSpec")
    n = probes.count
    if not 1 <= n <= op.dim:
        raise DimensionMismatch(f"xtrace needs 1 <= n <= D, got n={n}, D={op.dim}")
    rng = child_rng(probes.seed, "xtrace", trial)
    Om = draw_probes(probes.kind, op.dim, n, rng)
    if probes.kind == "rademacher":
        Om = _full_rank_sign_columns(Om, rng)
    return xtrace_core(op, Om)


def xtrace_core(op: MatVecOperator, Om: np.ndarray) -> TraceEstimate:
    """Leave-one-out estimate from an explicit probe block Om (D, n)."""
    before = op.matvec_counter
    Y = op.apply_columns(Om)
    if not np.all(np.isfinite(Y)):
        raise NonFiniteOperator("operator produced non-finite sketch")

    # Drop probe columns whose sketch column is numerically dependent, so R
    # stays invertible; report how many survived.
    Q, R = np.linalg.qr(Y, mode="reduced")
    diag = np.abs(np.diag(R))
    keep = diag > 1e-10 * max(1.0, diag.max(initial=0.0))
    if not np.all(keep):
        Om = Om[:, keep]
        Y = Y[:, keep]
        if Y.shape[1] == 0:
            return TraceEstimate(0.0, op.matvec_counter - before, "xtrace", effective_rank=0)
        Q, R = np.linalg.qr(Y, mode="reduced")
        # Deflation now captures the full action of A on the sketch range;
        # finish with the projected head term alone.
        AQ = op.apply_columns(Q)
        head = float(np.sum(Q * AQ))
        used = op.matvec_counter - before
        return TraceEstimate(head, used, "xtrace", effective_rank=Q.shape[1])

    m = Y.shape[1]
    Z = op.apply_columns(Q)
    used = op.matvec_counter - before

    # Leave-one-out recombination; probes have exact norm sqrt(D) for the
    # sign-pattern distribution, which the scale factor assumes.
    W = Q.T @ Om
    Rinv_t = solve_triangular(R, np.eye(m)).T
    S = Rinv_t / np.linalg.norm(Rinv_t, axis=0)
    H = Q.T @ Z
    T = Z.T @ Om

    def diag_prod(A, B):
        return np.sum(A * B, axis=0)

    HW = H @ W
    dSW = diag_prod(S, W)
    dSHS = diag_prod(S, H @ S)
    dTW = diag_prod(T, W)
    dWHW = diag_prod(W, HW)
    dSRmHW = diag_prod(S, R - HW)
    dTmHRS = diag_prod(T - H.T @ W, S)

    c = op.dim - m + 1
    scale = c / (op.dim - diag_prod(W, W) + (dSW * np.linalg.norm(S, axis=0)) ** 2)

    ests = np.trace(H) - dSHS + (-dTW + dWHW + dSW * dSRmHW + np.abs(dSW) ** 2 * dSHS + dTmHRS * dSW) * scale
    return TraceEstimate(float(ests.mean()), used, "xtrace", effective_rank=m)


def hutchpp_core(op: MatVecOperator, S: np.ndarray, G: np.ndarray, cached_basis: Optional[np.ndarray] = None):
    """Deflated estimate from explicit sketch/residual probe blocks.

    Skips the sketch step when a basis is supplied (2n products instead of
    3n). Returns (TraceEstimate, basis).
    """
    before = op.matvec_counter
    if cached_basis is not None:
        Q, rank = np.asarray(cached_basis, dtype=float), cached_basis.shape[1]
    else:
        Y = op.apply_columns(S)
        if not np.all(np.isfinite(Y)):
            raise NonFiniteOperator("operator produced non-finite sketch")
        Q, rank = _orthonormalize_sketch(Y)
    AQ = op.apply_columns(Q) if rank > 0 else np.zeros((op.dim, 0))
    head = float(np.sum(Q * AQ))
    Gp = G - Q @ (Q.T @ G) if rank > 0 else G
    AGp = op.apply_columns(Gp)
    resid = float(np.sum(Gp * AGp) / G.shape[1])
    est = TraceEstimate(head + resid, op.matvec_counter - before, "hutchpp", effective_rank=rank)
    return est, Q


# ---------------------------------------------------------------------------
# Random-matrix benchmark
# ---------------------------------------------------------------------------

def _random_test_matrix(dim: int, psd: bool, rng: np.random.Generator) -> np.ndarray:
    """Entries N(0,1), or |N(0,1)| for the positive-ensemble variant."""
    A = rng.standard_normal((dim, dim))
    return np.abs(A) if psd else A


def budget_to_probe_count(estimator: str, budget: int) -> int:
    """Probes affordable inside a matvec budget: m, m//3, m//2 respectively."""
    if estimator == "hutchinson":
        return budget
    if estimator == "hutchpp":
        return budget // 3
    if estimator == "xtrace":
        return budget // 2
    raise ValueError(f"unknown estimator {estimator!r}")


def random_matrix_benchmark(
    dims,
    psd: bool,
    budgets,
    trials,
    seed: int = 0,
    estimators=("hutchinson", "hutchpp", "xtrace"),
):
    """Mean absolute error of each estimator against the exact trace.

    For each matrix size D and matvec budget m, draws ``trials`` random test
    matrices (shared across estimators so comparisons are paired) and
    averages |estimate - exact trace|. Estimators that cannot run inside a
    given budget (zero probes, or more probes than D allows) are skipped.

    Parameters
    ----------
    dims : iterable of int
    psd : bool
        Positive ensemble (half-normal entries) vs. plain normal entries.
    budgets : iterable of int
        Matrix-vector product budgets m.
    trials : int or dict
        Trials per D; a dict maps D -> trial count.

    Returns
    -------
    list of dict
        Rows with keys estimator, D, m, psd, trials, mae, seed.
    """
    rows = []
    for D in dims:
        B = trials[D] if isinstance(trials, dict) else int(trials)
        mats = []
        exacts = []
        for b in range(B):
            A = _random_test_matrix(D, psd, child_rng(seed, "bench-matrix", D, int(psd), b))
            mats.append(A)
            exacts.append(np.trace(A))
        for m in budgets:
            for estimator in estimators:
                n = budget_to_probe_count(estimator, int(m))
                if n < 1:
                    continue
                if estimator in ("hutchpp", "xtrace") and n > D:
                    continue
                abserr = np.empty(B)
                for b, (A, tr) in enumerate(zip(mats, exacts)):
                    op = MatVecOperator.from_matrix(A)
                    spec = ProbeSpec(kind="rademacher", count=n, seed=seed)
                    if estimator == "hutchinson":
                        est = hutchinson_trace(op, spec, trial=b * 7919 + D)
                    elif estimator == "hutchpp":
                        est, _ = hutchpp_trace(op, spec, trial=b * 7919 + D)
                    else:
                        est = xtrace(op, spec, trial=b * 7919 + D)
                    abserr[b] = abs(est.value - tr)
                rows.append(
                    {
                        "estimator": estimator,
                        "D": D,
                        "m": int(m),
                        "psd": psd,
                        "trials": B,
                        "mae": float(abserr.mean()),
                        "seed": seed,
                    }
                )
    return rows


def benchmark_rows_to_csv(rows, path):
    """Write benchmark rows as CSV with a fixed column order."""
    import csv

    cols = ["estimator", "D", "m", "psd", "trials", "mae", "seed"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in cols})
