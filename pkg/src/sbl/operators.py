"""Matrix-free dictionary operators and the implicit SBL system matrix.

Each operator represents an N x D dictionary Phi through fast forward and
adjoint applications.  Three structured kinds are provided (dense Gaussian,
row-subsampled orthonormal DCT-II, truncated exponential-decay convolution)
plus explicit dense matrices.  Every kind also ships a naive materialized
path, which the tests use as the oracle for the fast path.

SystemMatrix composes an operator with noise precision beta and the current
precision vector alpha into the implicit SPD matrix

    A = beta * Phi^T Phi + diag(alpha)

applied column-by-column without ever forming a D x D array.
"""

import numpy as np
from scipy.fft import dct, idct, next_fast_len, rfft, irfft


class ShapeMismatchError(ValueError):
    """Input array shape is inconsistent with the operator."""

    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected shape {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


def _as_columns(V, nrows, what):
    V = np.asarray(V, dtype=np.float64)
    single = V.ndim == 1
    if single:
        V = V[:, None]
    if V.ndim != 2 or V.shape[0] != nrows:
        raise ShapeMismatchError(what, (nrows, "Q"), np.shape(V))
    return V, single


class LinearOperator:
    """Base class: an implicit N x D real matrix with fast apply/adjoint."""

    kind = "abstract"

    def __init__(self, n_rows, n_cols):
        if n_rows < 1 or n_cols < 1:
            raise ValueError(f"operator dims must be positive, got {n_rows} x {n_cols}")
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)

    # fast paths, implemented per kind on validated 2-D float64 input
    def _apply(self, V):
        raise NotImplementedError

    def _apply_adjoint(self, U):
        raise NotImplementedError

    def _materialize(self):
        raise NotImplementedError

    def apply(self, V):
        """Phi @ V for a (D,) vector or (D, Q) matrix."""
        V, single = _as_columns(V, self.n_cols, f"{self.kind} apply")
        out = self._apply(V)
        return out[:, 0] if single else out

    def apply_adjoint(self, U):
        """Phi^T @ U for an (N,) vector or (N, Q) matrix."""
        U, single = _as_columns(U, self.n_rows, f"{self.kind} apply_adjoint")
        out = self._apply_adjoint(U)
        return out[:, 0] if single else out

    def materialize(self):
        """Dense N x D copy of the implicit matrix (tests and small problems)."""
        m = self._materialize()
        assert m.shape == (self.n_rows, self.n_cols)
        return m

    # naive O(D^2) reference paths, the oracle side of the fast/naive pair
    def apply_naive(self, V):
        V, single = _as_columns(V, self.n_cols, f"{self.kind} apply_naive")
        out = self.materialize() @ V
        return out[:, 0] if single else out

    def apply_adjoint_naive(self, U):
        U, single = _as_columns(U, self.n_rows, f"{self.kind} apply_adjoint_naive")
        out = self.materialize().T @ U
        return out[:, 0] if single else out

    def column_sq_norms(self):
        """Squared Euclidean norm of each implicit column, length D."""
        # generic fallback: apply to the identity one block at a time
        out = np.empty(self.n_cols)
        block = 256
        for start in range(0, self.n_cols, block):
            stop = min(start + block, self.n_cols)
            E = np.zeros((self.n_cols, stop - start))
            E[np.arange(start, stop), np.arange(stop - start)] = 1.0
            cols = self._apply(E)
            out[start:stop] = np.einsum("iq,iq->q", cols, cols)
        return out


class DenseOperator(LinearOperator):
    """Explicit dense matrix; also the representation of the Gaussian kind."""

    kind = "explicit-dense"

    def __init__(self, matrix, kind=None):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("dense operator needs a 2-D matrix")
        super().__init__(*matrix.shape)
        matrix.flags.writeable = False
        self.matrix = matrix
        if kind is not None:
            self.kind = kind

    def _apply(self, V):
        return self.matrix @ V

    def _apply_adjoint(self, U):
        return self.matrix.T @ U

    def _materialize(self):
        return self.matrix.copy()

    def column_sq_norms(self):
        return np.einsum("ij,ij->j", self.matrix, self.matrix)


class SubsampledDctOperator(LinearOperator):
    """Phi = M Omega^{-1}: inverse orthonormal DCT-II rows selected by a mask.

    Under full sampling (N = D) the operator is orthonormal; undersampling
    keeps every row orthonormal so Phi Phi^T = I.
    """

    kind = "undersampled-dct"

    def __init__(self, dim, mask):
        mask = np.asarray(mask, dtype=np.int64)
        if mask.ndim != 1 or mask.size < 1:
            raise ValueError("mask must be a nonempty 1-D index array")
        if np.unique(mask).size != mask.size:
            raise ValueError("mask indices must be distinct")
        if mask.min() < 0 or mask.max() >= dim:
            raise ValueError(f"mask indices must lie in [0, {dim})")
        super().__init__(mask.size, dim)
        mask = np.sort(mask)
        mask.flags.writeable = False
        self.mask = mask

    def _apply(self, V):
        return idct(V, axis=0, norm="ortho")[self.mask, :]

    def _apply_adjoint(self, U):
        scattered = np.zeros((self.n_cols, U.shape[1]))
        scattered[self.mask, :] = U
        return dct(scattered, axis=0, norm="ortho")

    def _materialize(self):
        return idct(np.eye(self.n_cols), axis=0, norm="ortho")[self.mask, :]

    def column_sq_norms(self):
        # row j of the DCT-II basis evaluated on the masked sample points:
        # Phi_{i,j} = c_j cos(pi (2 m_i + 1) j / (2D)), c_0^2 = 1/D, c_j^2 = 2/D
        dim = self.n_cols
        pts = (2.0 * self.mask + 1.0) * (np.pi / (2.0 * dim))
        scale = np.full(dim, 2.0 / dim)
        scale[0] = 1.0 / dim
        out = np.empty(dim)
        block = 512
        for start in range(0, dim, block):
            stop = min(start + block, dim)
            freqs = np.arange(start, stop)
            c = np.cos(np.outer(freqs, pts))
            out[start:stop] = scale[start:stop] * np.einsum("ji,ji->j", c, c)
        return out


class ConvolutionOperator(LinearOperator):
    """Causal convolution with the truncated filter phi_m = (1-rho)^m.

    The implicit matrix is D x D lower-triangular Toeplitz; the fast path
    zero-pads to at least 2D-1 so the FFT product has no circular wrap.
    """

    kind = "exp-convolution"

    def __init__(self, dim, decay):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        super().__init__(dim, dim)
        self.decay = float(decay)
        filt = (1.0 - self.decay) ** np.arange(dim, dtype=np.float64)
        filt.flags.writeable = False
        self.filter = filt
        self._pad = next_fast_len(2 * dim - 1)
        self._filter_rfft = rfft(filt, self._pad)
        self._filter_rfft.flags.writeable = False

    def _apply(self, V):
        spec = rfft(V, self._pad, axis=0)
        spec *= self._filter_rfft[:, None]
        return irfft(spec, self._pad, axis=0)[: self.n_rows]

    def _apply_adjoint(self, U):
        spec = rfft(U, self._pad, axis=0)
        spec *= np.conj(self._filter_rfft)[:, None]
        return irfft(spec, self._pad, axis=0)[: self.n_cols]

    def _materialize(self):
        dim = self.n_cols
        m = np.zeros((dim, dim))
        for j in range(dim):
            m[j:, j] = self.filter[: dim - j]
        return m

    def column_sq_norms(self):
        # truncated geometric sums: column j holds filter entries 0..D-1-j
        r = (1.0 - self.decay) ** 2
        tail = np.arange(self.n_cols, 0, -1, dtype=np.float64)
        return (1.0 - r**tail) / (1.0 - r)


def build_dense_gaussian(n_rows, dim, rng):
    """Dense dictionary with i.i.d. N(0, 1/N) entries."""
    if not 1 <= n_rows <= dim:
        raise ValueError(f"need 1 <= N <= D, got N={n_rows}, D={dim}")
    entries = rng.normal(0.0, 1.0 / np.sqrt(n_rows), size=(n_rows, dim))
    return DenseOperator(entries, kind="dense-gaussian")


def build_undersampled_dct(dim, n_rows, rng):
    """Orthonormal DCT-II rows subsampled uniformly without replacement."""
    if not 1 <= n_rows <= dim:
        raise ValueError(f"need 1 <= N <= D, got N={n_rows}, D={dim}")
    mask = rng.choice(dim, size=n_rows, replace=False)
    return SubsampledDctOperator(dim, mask)


def build_exp_convolution(dim, decay):
    """Lower-triangular convolution with filter (1-rho)^(m), m = 0..D-1."""
    return ConvolutionOperator(dim, decay)


class SystemMatrix:
    """Implicit A = beta * Phi^T Phi + diag(alpha), SPD by construction."""

    def __init__(self, op, beta, alpha):
        if beta <= 0:
            raise ValueError(f"beta must be positive, got {beta}")
        alpha = np.array(alpha, dtype=np.float64)
        if alpha.shape != (op.n_cols,):
            raise ShapeMismatchError("alpha", (op.n_cols,), alpha.shape)
        if not np.all(alpha > 0):
            raise ValueError("alpha entries must all be positive")
        alpha.flags.writeable = False
        self.op = op
        self.beta = float(beta)
        self.alpha = alpha

    @property
    def dim(self):
        return self.op.n_cols

    def apply(self, V):
        """A @ V without materializing A."""
        V, single = _as_columns(V, self.dim, "system apply")
        out = self.beta * self.op._apply_adjoint(self.op._apply(V))
        out += self.alpha[:, None] * V
        return out[:, 0] if single else out
