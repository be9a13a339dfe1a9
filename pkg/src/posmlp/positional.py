"""Relative displacements and the positional weight-matrix generators.

A ``k x k`` token window induces an ``N x N`` table of 2-D displacements
(N = k^2).  Two families of generators turn parameters into token-mixing
matrices indexed by displacement:

* a learnable lookup table with one scalar per distinct displacement, and
* a quadratic (Gaussian) form with a learnable center and precision factor,
  evaluated through fixed polynomial displacement features and a row softmax.

Both keep the defining property that matrix entries depend on token pairs
only through their displacement.
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

PRECISION_EPS = 1e-6


class CovarianceForm(Enum):
    """Parameterization of the quadratic form's precision matrix."""

    ALPHA_I = "alpha_i"        # isotropic: softplus scalar times identity
    GAMMA_RAW = "gamma_raw"    # the raw 2x2 factor itself (may be indefinite)
    GAMMA_GRAMIAN = "gramian"  # Gamma @ Gamma^T + eps*I (positive definite)


class DisplacementGrid:
    """All pairwise displacements ``p_j - p_i`` of a k x k raster window.

    Token i sits at ``(i // k, i % k)``; components therefore lie in
    ``[-k+1, k-1]`` and the table is antisymmetric with a zero diagonal.
    """

    def __init__(self, window_side):
        k = int(window_side)
        if k < 1:
            raise ValueError(f"window side must be >= 1, got {window_side}")
        self.window_side = k
        self.n_tokens = k * k
        pos = np.arange(self.n_tokens)
        px = pos // k
        py = pos % k
        self.dx = px[None, :] - px[:, None]
        self.dy = py[None, :] - py[:, None]

    def displacements(self):
        """(N, N, 2) integer array of (dx, dy) pairs."""
        return np.stack([self.dx, self.dy], axis=-1)


@lru_cache(maxsize=None)
def displacement_grid(window_side):
    return DisplacementGrid(window_side)


def lrpe_index_map(grid):
    """(N, N) indices into the (2k-1)^2 lookup vector.

    idx(d) = (dx + k - 1) * (2k - 1) + (dy + k - 1); a bijection from the
    displacement range onto [0, (2k-1)^2), fixed for file-format stability.
    """
    k = grid.window_side
    return (grid.dx + k - 1) * (2 * k - 1) + (grid.dy + k - 1)


class LrpeTable:
    """Learnable displacement dictionary; one row of (2k-1)^2 scalars per group."""

    def __init__(self, window_side, group_count=1, rng=None, dtype=np.float32, std=0.02):
        if group_count < 1:
            raise ValueError("group_count must be >= 1")
        self.window_side = int(window_side)
        self.group_count = int(group_count)
        n_entries = (2 * self.window_side - 1) ** 2
        rng = rng or np.random.default_rng(0)
        self.values = Tensor(trunc_normal(rng, (self.group_count, n_entries), std, dtype),
                             requires_grad=True)

    @property
    def entries_per_group(self):
        return self.values.shape[1]


def lrpe_weight_matrix(table, grid, group=0):
    """Look the displacement table up into an ``N x N`` mixing matrix.

    No softmax is applied; the lookup value is used directly as the weight.
    """
    if table.window_side != grid.window_side:
        raise ValueError(
            f"table window {table.window_side} does not match grid {grid.window_side}")
    if not 0 <= group < table.group_count:
        raise IndexError(f"group {group} out of range for {table.group_count} tables")
    n = grid.n_tokens
    idx = lrpe_index_map(grid).reshape(-1) + group * table.entries_per_group
    return T.take(table.values, idx, (n, n))


@dataclass
class GqpeEmbedding:
    """Fixed polynomial features [dx, dy, dx^2, dy^2, dx*dy] per displacement."""

    window_side: int
    table: np.ndarray  # (N, N, 5)

    @property
    def flat(self):
        return self.table.reshape(-1, 5)


def gqpe_embedding(grid, dtype=np.float64):
    dx = grid.dx.astype(dtype)
    dy = grid.dy.astype(dtype)
    table = np.stack([dx, dy, dx * dx, dy * dy, dx * dy], axis=-1)
    return GqpeEmbedding(grid.window_side, table)


class GqpeGroupParams:
    """Per-group center shift and precision factor of the quadratic prior.

    ``delta`` shifts the attention peak relative to the query token (token
    units); the covariance form selects how the 2x2 precision is built.  A
    frozen delta stays at (0, 0) and receives no gradient.  Under ALPHA_I the
    only learnable value is the softplus-reparameterized scalar, so delta is
    necessarily frozen.
    """

    def __init__(self, form=CovarianceForm.GAMMA_GRAMIAN, delta_frozen=False,
                 rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.form = CovarianceForm(form)
        if self.form is CovarianceForm.ALPHA_I and not delta_frozen:
            raise ValueError("ALPHA_I admits only the scalar as learnable; freeze delta")
        self.delta_frozen = bool(delta_frozen)
        if self.delta_frozen:
            self.delta = Tensor(np.zeros(2, dtype=dtype), requires_grad=False)
        else:
            self.delta = Tensor(rng.uniform(-0.5, 0.5, size=2).astype(dtype),
                                requires_grad=True)
        self.gamma = None
        self.alpha_raw = None
        if self.form is CovarianceForm.ALPHA_I:
            # softplus(raw) + eps == 1 at init -> unit isotropic precision
            raw = np.log(np.expm1(1.0 - PRECISION_EPS))
            self.alpha_raw = Tensor(np.full(1, raw, dtype=dtype), requires_grad=True)
        else:
            g = np.eye(2) + rng.normal(0.0, 0.1, size=(2, 2))
            self.gamma = Tensor(g.astype(dtype), requires_grad=True)

    @property
    def dtype(self):
        t = self.alpha_raw if self.alpha_raw is not None else self.gamma
        return t.dtype

    def parameters(self):
        out = {}
        if not self.delta_frozen:
            out["delta"] = self.delta
        if self.gamma is not None:
            out["gamma"] = self.gamma
        if self.alpha_raw is not None:
            out["alpha_raw"] = self.alpha_raw
        return out

    def precision(self):
        """The 2x2 matrix fed into the quadratic form, as a tape tensor."""
        dtype = self.dtype
        if self.form is CovarianceForm.GAMMA_GRAMIAN:
            eps_eye = Tensor(np.eye(2, dtype=dtype) * PRECISION_EPS)
            return T.add(T.matmul(self.gamma, T.transpose2(self.gamma)), eps_eye)
        if self.form is CovarianceForm.GAMMA_RAW:
            return self.gamma
        alpha = T.add_scalar(T.softplus(self.alpha_raw), PRECISION_EPS)
        zero = Tensor(np.zeros(1, dtype=dtype))
        return T.reshape(T.concat([alpha, zero, zero, alpha], axis=0), (2, 2))

    def effective_precision_numpy(self):
        """The symmetric matrix inducing the quadratic part of the logits.

        The 5-vector's quadratic entries consume (0,0), (1,1) and (0,1), so
        an asymmetric raw factor acts through its upper entry mirrored.  Its
        linear entries use the full ``P @ delta`` product, so only with a
        symmetric precision (or a frozen center) do the logits equal the
        Gaussian form of this matrix up to a constant.
        """
        p = self.precision().data
        return np.array([[p[0, 0], p[0, 1]], [p[0, 1], p[1, 1]]], dtype=np.float64)


def gqpe_vector(params):
    """Assemble the 5-vector [P d, P d, -P00/2, -P11/2, -P01] (d = delta).

    Dotted with the displacement features this reproduces the Gaussian
    logits up to a displacement-independent offset that the row softmax
    cancels.
    """
    p = params.precision()
    delta = params.delta
    if params.delta.dtype != p.dtype:
        delta = Tensor(params.delta.data.astype(p.dtype), requires_grad=False)
    pd = T.matmul(p, T.reshape(delta, (2, 1)))
    p00 = T.take(p, [0], (1,))
    p01 = T.take(p, [1], (1,))
    p11 = T.take(p, [3], (1,))
    return T.concat([T.reshape(pd, (2,)),
                     T.scale(p00, -0.5),
                     T.scale(p11, -0.5),
                     T.scale(p01, -1.0)], axis=0)


def gqpe_logits(params, emb):
    """Pre-softmax ``N x N`` logits; equal displacements give equal entries."""
    n = emb.window_side ** 2
    v = gqpe_vector(params)
    feat = Tensor(emb.flat.astype(v.dtype))
    flat = T.matmul(feat, T.reshape(v, (5, 1)))
    return T.reshape(flat, (n, n))


def gqpe_weight_matrix(params, emb):
    """Row-stochastic positional mixing matrix of the quadratic prior."""
    return T.softmax_rows(gqpe_logits(params, emb))


def group_weight_stack(params_list, emb):
    """One weight matrix per group, sharing a single displacement embedding."""
    if not params_list:
        raise ValueError("group_weight_stack needs at least one parameter group")
    return [gqpe_weight_matrix(p, emb) for p in params_list]


def trunc_normal(rng, shape, std, dtype):
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)
