"""Parameterized hypercomplex multiplication (PHM) affine layers.

The weight of a PHM layer is a sum of Kronecker products

    W = sum_i kron(A_i, B_i),   A_i: n x n,   B_i: (m/n) x (d/n)

which cuts the dense m*d weight cost to n^3 + m*d/n. The A_i may be shared
between layers through :class:`SharedAPool`.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as F
from .errors import BiasIndexError, ConfigError, DimensionError
from .tensor import Tensor

# Above this many weight entries the forward pass skips materialising W.
MATERIALIZE_LIMIT = 4096


def phm_param_count(n, m, d, own_A=True, num_biases=1):
    """Trainable parameters of one PHM layer mapping d -> m."""
    if n < 1 or m % n or d % n:
        raise ConfigError(f"PHM factor n={n} must divide both m={m} and d={d}")
    return (n ** 3 if own_A else 0) + (m * d) // n + num_biases * m


def dense_param_count(m, d, num_biases=1):
    return m * d + num_biases * m


class ASet:
    """One set of n shared n x n matrices, with a count of the layers using it."""

    def __init__(self, matrices, name):
        self.matrices = list(matrices)
        self.name = name
        self.refcount = 0

    @property
    def n(self):
        return len(self.matrices)

    def named_parameters(self):
        return {f"phm/{self.name}/A.{i}": a for i, a in enumerate(self.matrices)}

    def num_params(self):
        return sum(a.size for a in self.matrices)


class SharedAPool:
    """Registry of A-matrix sets; each set's parameters are owned exactly once."""

    def __init__(self):
        self.entries = []

    def new(self, n, rng, dtype=np.float64, name=None):
        name = name or f"apool{len(self.entries)}"
        mats = []
        for i in range(n):
            a = Tensor(rng.normal(0.0, 1.0 / n, size=(n, n)).astype(dtype), requires_grad=True)
            a.name = f"phm/{name}/A.{i}"
            mats.append(a)
        entry = ASet(mats, name)
        self.entries.append(entry)
        return entry

    def named_parameters(self):
        out = {}
        for e in self.entries:
            out.update(e.named_parameters())
        return out

    def num_params(self):
        return sum(e.num_params() for e in self.entries)


def _bias_bank(m, num_biases, dtype, prefix):
    bank = []
    for j in range(num_biases):
        b = Tensor(np.zeros(m, dtype=dtype), requires_grad=True)
        b.name = f"{prefix}/bias.{j}"
        bank.append(b)
    return bank


class _Affine:
    """Shared bias handling for the dense and PHM layers."""

    in_dim: int
    out_dim: int
    biases: list

    def _select_bias(self, bias_index):
        if not self.biases:
            if bias_index != 0:
                raise BiasIndexError(f"layer has no bias bank; bias_index={bias_index}")
            return None
        if not 0 <= bias_index < len(self.biases):
            raise BiasIndexError(
                f"bias_index={bias_index} out of range for a bank of {len(self.biases)}"
            )
        return self.biases[bias_index]

    def _check_input(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"input width {x.shape[-1]} != layer in_dim {self.in_dim}")

    def __call__(self, x, bias_index=0, tape=None):
        return self.forward(x, bias_index, tape)


class DenseLinear(_Affine):
    """y = W x + b[bias_index] with W: out_dim x in_dim."""

    def __init__(self, weight, biases, name="dense"):
        self.weight = weight
        self.biases = list(biases)
        self.name = name
        self.out_dim, self.in_dim = weight.shape

    @classmethod
    def init(cls, in_dim, out_dim, rng, num_biases=1, dtype=np.float64, name="dense"):
        bound = math.sqrt(6.0 / (in_dim + out_dim))
        w = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype),
                   requires_grad=True)
        w.name = f"{name}/weight"
        return cls(w, _bias_bank(out_dim, num_biases, dtype, name), name)

    def named_parameters(self):
        out = {self.weight.name: self.weight}
        out.update({b.name: b for b in self.biases})
        return out

    def materialize_weight(self, tape=None):
        return self.weight

    def forward(self, x, bias_index=0, tape=None):
        self._check_input(x)
        bias = self._select_bias(bias_index)
        if tape is None:
            tape = x.tape
        y = F.matmul(x, F.transpose(self.weight, tape=tape), tape=tape)
        return y if bias is None else F.add(y, bias, tape=tape)


class PhmLinear(_Affine):
    """PHM affine map d -> m with an optional bank of biases."""

    def __init__(self, a_set, B, biases, name="phm"):
        n = a_set.n
        if len(B) != n:
            raise ConfigError(f"expected {n} B matrices, got {len(B)}")
        self.a_set = a_set
        a_set.refcount += 1
        self.B = list(B)
        self.biases = list(biases)
        self.name = name
        self.n = n
        rows, cols = self.B[0].shape
        self.out_dim, self.in_dim = rows * n, cols * n

    @classmethod
    def init(cls, in_dim, out_dim, n, rng, a_set=None, pool=None, num_biases=1,
             dtype=np.float64, name="phm"):
        if n < 1 or in_dim % n or out_dim % n:
            raise ConfigError(f"PHM factor n={n} must divide in_dim={in_dim} and out_dim={out_dim}")
        if a_set is None:
            pool = pool if pool is not None else SharedAPool()
            a_set = pool.new(n, rng, dtype, name=f"{name}.A")
        elif a_set.n != n:
            raise ConfigError(f"shared A set has n={a_set.n}, layer needs n={n}")
        rows, cols = out_dim // n, in_dim // n
        bound = math.sqrt(6.0 / (rows + cols))
        B = []
        for i in range(n):
            b = Tensor(rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype),
                       requires_grad=True)
            b.name = f"phm/{name}/B.{i}"
            B.append(b)
        return cls(a_set, B, _bias_bank(out_dim, num_biases, dtype, f"phm/{name}"), name)

    @property
    def A(self):
        return self.a_set.matrices

    def named_parameters(self, include_A=True):
        out = {}
        if include_A:
            out.update(self.a_set.named_parameters())
        out.update({b.name: b for b in self.B})
        out.update({b.name: b for b in self.biases})
        return out

    def materialize_weight(self, tape=None):
        """Explicit sum of Kronecker products, shape m x d."""
        W = None
        for a, b in zip(self.A, self.B):
            term = F.kron(a, b, tape=tape)
            W = term if W is None else F.add(W, term, tape=tape)
        return W

    def forward(self, x, bias_index=0, tape=None, path=None):
        """y = W x + bias[bias_index] for x of shape [d] or [B, d].

        ``path`` forces "materialize" or "blocks"; by default the weight is
        materialised only for small layers.
        """
        self._check_input(x)
        bias = self._select_bias(bias_index)
        if tape is None:
            tape = x.tape
        if path is None:
            path = "materialize" if self.out_dim * self.in_dim <= MATERIALIZE_LIMIT else "blocks"
        if path == "materialize":
            W = self.materialize_weight(tape)
            y = F.matmul(x, F.transpose(W, tape=tape), tape=tape)
        elif path == "blocks":
            y = self._block_forward(x, tape)
        else:
            raise ValueError(f"unknown forward path {path!r}")
        return y if bias is None else F.add(y, bias, tape=tape)

    def _block_forward(self, x, tape):
        # (A kron B) x == vec(A X B^T) with X the row-major n x (d/n) view of x
        n = self.n
        lead = x.shape[:-1]
        X = F.reshape(x, lead + (1, n, self.in_dim // n), tape=tape)
        Bt = F.swapaxes(F.stack(self.B, axis=0, tape=tape), -1, -2, tape=tape)
        XB = F.matmul(X, Bt, tape=tape)                     # [..., n_i, n, m/n]
        A = F.stack(self.A, axis=0, tape=tape)              # [n_i, n, n]
        Y = F.sum(F.matmul(A, XB, tape=tape), axis=-3, tape=tape)  # [..., n, m/n]
        return F.reshape(Y, lead + (self.out_dim,), tape=tape)

    def owned_param_count(self, include_A=False):
        count = sum(b.size for b in self.B) + sum(b.size for b in self.biases)
        return count + (self.a_set.num_params() if include_A else 0)
