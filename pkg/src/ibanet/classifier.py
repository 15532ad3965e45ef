"""Dual-branch classification head with fixed maximally-separated geometry.

One branch scores the normalized projected feature against a frozen simplex
equiangular tight frame (ETF): M unit prototypes with identical pairwise
inner product -1/(M-1), the most mutually repelled configuration possible.
The other branch is an ordinary learnable linear classifier. Final logits
blend the two with a fixed coefficient k; k=1 trusts only the fixed
geometry, and k=0 is the ablation that disables it entirely.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .layers import Linear

NORM_GUARD = 1e-12


@dataclass
class EtfPrototypes:
    """Frozen class-prototype matrix, one unit column per class."""

    V: np.ndarray  # (d, M), columns the normalized prototypes
    d: int
    M: int

    def gram(self):
        return self.V.T @ self.V

    def ideal_gram(self):
        M = self.M
        return (M / (M - 1.0)) * np.eye(M) - (1.0 / (M - 1.0)) * np.ones((M, M))

    def max_gram_deviation(self):
        return float(np.max(np.abs(self.gram() - self.ideal_gram())))


def _helmert_rows(m):
    """Orthonormal basis of the subspace orthogonal to the all-ones vector."""
    rows = np.zeros((m - 1, m))
    for i in range(1, m):
        rows[i - 1, :i] = 1.0
        rows[i - 1, i] = -float(i)
        rows[i - 1] /= np.sqrt(i * (i + 1.0))
    return rows


def _orthonormal_columns(rng, d, n):
    q, r = np.linalg.qr(rng.standard_normal((d, n)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs[None, :]


def generate_etf(n_classes, dim=None, seed=0):
    """Deterministic simplex ETF of ``n_classes`` prototypes in ``dim`` dims.

    ``dim`` defaults to ``n_classes``. Existence requires dim >= M-1. A
    seeded Gaussian QR (sign convention: positive R diagonal) fixes the
    orientation, so generation is a pure function of (M, dim, seed).
    """
    M = int(n_classes)
    if M < 2:
        raise ParameterError("an ETF needs at least 2 classes")
    d = M if dim is None else int(dim)
    if d < M - 1:
        raise ParameterError(
            f"simplex ETF of {M} classes needs dimension >= {M - 1}, got {d}"
        )
    c = np.sqrt(M / (M - 1.0))
    rng = np.random.default_rng((seed, 41))
    if d >= M:
        u = _orthonormal_columns(rng, d, M)
        center = np.eye(M) - np.ones((M, M)) / M
        v = c * (u @ center)
    else:
        # d = M-1: the centering projector has rank M-1, so compose an
        # orthonormal rotation with an explicit basis of the ones-complement
        u = _orthonormal_columns(rng, d, M - 1)
        v = c * (u @ _helmert_rows(M))
    v = v / np.linalg.norm(v, axis=0, keepdims=True)
    v.setflags(write=False)
    return EtfPrototypes(V=v, d=d, M=M)


class DualBranchHead:
    """Projector + ETF scoring alongside a learnable linear classifier.

    The blend coefficient k is a fixed hyperparameter; the learnable scale
    on the ETF branch starts at 1. The prototype matrix never appears in
    ``params()`` and is therefore invisible to any optimizer.
    """

    def __init__(self, rng, in_dim, prototypes, k):
        if not 0.0 <= k <= 1.0:
            raise ParameterError(f"blend coefficient k must lie in [0, 1], got {k}")
        self.k = float(k)
        self.prototypes = prototypes
        self.projector = Linear(rng, in_dim, prototypes.d)
        self.fc = Linear(rng, in_dim, prototypes.M)
        self.mu = T.Tensor(np.asarray(1.0), requires_grad=True)
        self._V = T.Tensor(prototypes.V)

    def etf_branch(self, feature):
        projected = self.projector(feature)
        directions = T.l2_normalize(projected)
        return T.mul(T.matmul(directions, self._V), self.mu)

    def fc_branch(self, feature):
        return self.fc(feature)

    def __call__(self, feature):
        z_etf = self.etf_branch(feature)
        z_fc = self.fc_branch(feature)
        return blend(z_etf, z_fc, self.k), z_etf, z_fc

    def fc_weight_matrix(self):
        """Learnable classifier vectors as columns: (in_dim, M)."""
        return self.fc.w.data.copy()

    def params(self, prefix="head"):
        return (
            self.projector.params(f"{prefix}.projector")
            + self.fc.params(f"{prefix}.fc")
            + [(f"{prefix}.mu", self.mu)]
        )


def blend(z_etf, z_fc, k):
    """Z = k * fixed-geometry logits + (1-k) * learnable logits."""
    return T.add(T.scale(z_etf, k), T.scale(z_fc, 1.0 - k))


def predict(logits):
    """Argmax class per row; sigmoid is monotone so raw logits suffice."""
    z = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    return np.argmax(z, axis=-1)
