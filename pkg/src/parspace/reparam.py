"""Weights stored as frozen SVD bases plus trainable coefficients.

A pretrained weight W (matricized to d x k with d <= k) is kept as
``U @ diag(p) @ V.T``. ``p`` starts at the singular values; which of
``{p, U, V}`` receive gradients is set by the mode.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import linalg
from .tensor import DimensionError, Tensor, record, reshape, transpose


class Mode(str, Enum):
    COEFFICIENTS = "coeff"
    BASES = "bases"
    BOTH = "both"

    @classmethod
    def parse(cls, text):
        aliases = {"coeff": cls.COEFFICIENTS, "coefficients": cls.COEFFICIENTS,
                   "coefficientsonly": cls.COEFFICIENTS, "bases": cls.BASES,
                   "basesonly": cls.BASES, "both": cls.BOTH}
        try:
            return aliases[text.lower().replace("_", "").replace("-", "")]
        except KeyError:
            raise ValueError(f"unknown reparam mode {text!r}") from None


@dataclass(frozen=True)
class Matricization:
    """Reversible n-D weight <-> 2-D matrix map.

    Conv weights (O, C, kh, kw) flatten to O x (C*kh*kw); a result with more
    rows than columns is transposed so that d <= k.
    """

    orig_shape: tuple
    transposed: bool

    @classmethod
    def for_shape(cls, shape):
        shape = tuple(int(s) for s in shape)
        rows = shape[0]
        cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
        return cls(shape, rows > cols)

    @property
    def matrix_shape(self):
        rows = self.orig_shape[0]
        cols = int(np.prod(self.orig_shape[1:])) if len(self.orig_shape) > 1 else 1
        return (cols, rows) if self.transposed else (rows, cols)

    def to_matrix(self, w):
        m = np.asarray(w).reshape(self.orig_shape[0], -1)
        return m.T if self.transposed else m

    def from_matrix(self, m):
        m = np.asarray(m)
        return (m.T if self.transposed else m).reshape(self.orig_shape)


def _coeff_grad(G, U, V):
    return np.einsum("ij,ij->j", U, G @ V)


def _bases_grad(G, U, p, V):
    return (G @ V) * p, (G.T @ U) * p


def _compose(U, p, V):
    """Graph op: (U, p, V) -> U diag(p) V^T."""

    def bw(g):
        gp = _coeff_grad(g, U.data, V.data) if p.requires_grad else None
        gu = gv = None
        if U.requires_grad or V.requires_grad:
            gu, gv = _bases_grad(g, U.data, p.data, V.data)
        return gu, gp, gv

    return record((U.data * p.data) @ V.data.T, (U, p, V), bw, "svd_compose")


class SvdReparam:
    """U (d x d), p (d,), V (k x d) standing in for one weight tensor."""

    def __init__(self, U, p, V, mode, matricization):
        self.U = U if isinstance(U, Tensor) else Tensor(U)
        self.p = p if isinstance(p, Tensor) else Tensor(p)
        self.V = V if isinstance(V, Tensor) else Tensor(V)
        self.mode = Mode(mode)
        self.matricization = matricization
        self.set_mode(self.mode)

    @property
    def orig_shape(self):
        return self.matricization.orig_shape

    @property
    def d(self):
        return self.U.shape[0]

    @property
    def k(self):
        return self.V.shape[0]

    def set_mode(self, mode):
        self.mode = Mode(mode)
        self.p.requires_grad = self.mode in (Mode.COEFFICIENTS, Mode.BOTH)
        bases = self.mode in (Mode.BASES, Mode.BOTH)
        self.U.requires_grad = bases
        self.V.requires_grad = bases

    def factors(self):
        return {"U": self.U, "p": self.p, "V": self.V}

    def trainable_factors(self):
        return {k: t for k, t in self.factors().items() if t.requires_grad}

    def matrix(self):
        return _compose(self.U, self.p, self.V)

    def weight(self):
        m = self.matrix()
        if self.matricization.transposed:
            m = transpose(m)
        return reshape(m, self.orig_shape)

    def rank1_sum(self):
        """Sum_i p_i u_i v_i^T, accumulated term by term (numpy, no graph)."""
        out = np.zeros((self.d, self.k))
        for i in range(self.d):
            out += self.p.data[i] * np.outer(self.U.data[:, i], self.V.data[:, i])
        return out

    def clone(self):
        return SvdReparam(self.U.data.copy(), self.p.data.copy(), self.V.data.copy(),
                          self.mode, self.matricization)


def decompose(w, mode=Mode.COEFFICIENTS):
    """Matricize ``w``, take its SVD, and seed the coefficients with sigma."""
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    mat = Matricization.for_shape(w.shape)
    r = linalg.svd(mat.to_matrix(w))
    return SvdReparam(r.U, r.sigma, r.V, mode, mat)


def forward(rp):
    return rp.weight()


def _check_grad_shape(G, rp):
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (rp.d, rp.k):
        raise DimensionError(f"weight gradient {G.shape} does not match matricized weight {(rp.d, rp.k)}")
    return G


def grad_coefficients(G, rp):
    """dL/dp = diag(U^T G V) for an upstream matricized-weight gradient G."""
    G = _check_grad_shape(G, rp)
    return _coeff_grad(G, rp.U.data, rp.V.data)


def grad_bases(G, rp):
    """(dL/dU, dL/dV) = (G V diag(p), G^T U diag(p))."""
    G = _check_grad_shape(G, rp)
    return _bases_grad(G, rp.U.data, rp.p.data, rp.V.data)


def trainable_count(rp):
    d, k = rp.d, rp.k
    return {Mode.COEFFICIENTS: d, Mode.BASES: d * d + k * d, Mode.BOTH: d * d + d + k * d}[rp.mode]
