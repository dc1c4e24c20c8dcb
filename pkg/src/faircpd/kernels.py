"""Kernel dependence measures between factor rows and sensitive features.

All measures take ``a`` (n x r, one embedding per row) and ``s`` (n x d,
sensitive features per row). The kernel criterion is

    khsic(a, s) = <H K_a H, H K_s H> / n^2,    H = I - 11^T / n,

with RBF kernels ``exp(-gamma ||x - y||^2)`` by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ResourceError, UndefinedAlignmentError
from .tensor import as_array


@dataclass(frozen=True)
class KernelConfig:
    """Kernel choice for one side of the criterion. ``kind`` is "rbf" or "linear"."""

    gamma: float = 1.0
    kind: str = "rbf"

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


RBF1 = KernelConfig()
LINEAR = KernelConfig(kind="linear")


def _pair(a, s):
    a = as_array(a, 2, "a")
    s = as_array(s, 2, "s")
    if a.shape[0] != s.shape[0]:
        raise DimensionError(f"row mismatch: a has {a.shape[0]} rows, s has {s.shape[0]}")
    return a, s


def sq_distances(m: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows, exactly zero on the diagonal."""
    sq = np.einsum("ij,ij->i", m, m)
    d = sq[:, None] + sq[None, :] - 2.0 * (m @ m.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    # symmetrize away rounding differences between (i, j) and (j, i)
    return 0.5 * (d + d.T)


def rbf_gram(m, cfg: KernelConfig = RBF1) -> np.ndarray:
    """RBF Gram matrix ``exp(-gamma ||m_i - m_j||^2)``; the diagonal is exactly 1."""
    m = as_array(m, 2, "m")
    if m.shape[0] < 1:
        raise DimensionError("need at least one row")
    return np.exp(-cfg.gamma * sq_distances(m))


def gram(m, cfg: KernelConfig = RBF1) -> np.ndarray:
    m = as_array(m, 2, "m")
    if cfg.kind == "linear":
        return m @ m.T
    return rbf_gram(m, cfg)


def center_gram(k) -> np.ndarray:
    """``H K H`` with ``H = I - 11^T/n``, computed by subtracting row/column means."""
    k = np.asarray(k, dtype=np.float64)
    col = k.mean(axis=0, keepdims=True)
    row = k.mean(axis=1, keepdims=True)
    return k - col - row + k.mean()


def centered_gram(m, cfg: KernelConfig = RBF1) -> np.ndarray:
    return center_gram(gram(m, cfg))


def khsic(a, s, cfg_a: KernelConfig = RBF1, cfg_s: KernelConfig = RBF1) -> float:
    """Empirical kernel HSIC, ``<K~_a, K~_s> / n^2``.

    The value is an inner product of two PSD matrices, hence nonnegative;
    rounding noise in ``[-1e-12, 0)`` is clamped to zero.
    """
    a, s = _pair(a, s)
    n = a.shape[0]
    if n < 2:
        raise DimensionError("khsic needs at least two rows")
    # <H Ka H, H Ks H> = <Ka, H Ks H> since H is symmetric and idempotent
    val = float(np.sum(gram(a, cfg_a) * centered_gram(s, cfg_s))) / n**2
    if -1e-12 <= val < 0.0:
        val = 0.0
    return val


def normalized_khsic(a, s, cfg_a: KernelConfig = RBF1, cfg_s: KernelConfig = RBF1) -> float:
    """Centered kernel alignment: cosine of the angle between the centered Grams.

    Raises
    ------
    UndefinedAlignmentError
        If either centered Gram matrix vanishes (e.g. all rows identical).
    """
    a, s = _pair(a, s)
    ka = centered_gram(a, cfg_a)
    ks = centered_gram(s, cfg_s)
    na = np.linalg.norm(ka)
    ns = np.linalg.norm(ks)
    tol = 1e-12 * a.shape[0]
    if na <= tol or ns <= tol:
        raise UndefinedAlignmentError("centered Gram matrix is zero; alignment undefined")
    return float(np.clip(np.sum(ka * ks) / (na * ns), -1.0, 1.0))


def _column_center(m):
    return m - m.mean(axis=0, keepdims=True)


def hsic_linear(a, s) -> float:
    """``||A~^T S~||_F^2`` with column-mean-centered ``A~`` and ``S~``."""
    a, s = _pair(a, s)
    return float(np.sum((_column_center(a).T @ _column_center(s)) ** 2))


def fatr_orthogonality(a, s) -> float:
    """Uncentered orthogonality penalty ``||A^T S||_F^2``."""
    a, s = _pair(a, s)
    return float(np.sum((a.T @ s) ** 2))


def orthogonality_norm(a, s) -> float:
    """``||A^T S||_F`` (not squared), the quantity reported in experiments."""
    return float(np.sqrt(fatr_orthogonality(a, s)))


# -- gradients w.r.t. a ------------------------------------------------------

def khsic_grad_a_from_centered(a: np.ndarray, ks_centered: np.ndarray, gamma: float) -> np.ndarray:
    """KHSIC gradient given a precomputed centered sensitive Gram.

    Only ``K_a`` depends on ``a``. With ``W = K_a * K~_s`` (elementwise),

        d khsic / d a_p = -(4 gamma / n^2) sum_j W_pj (a_p - a_j).
    """
    n = a.shape[0]
    w = np.exp(-gamma * sq_distances(a)) * ks_centered
    return (-4.0 * gamma / n**2) * (w.sum(axis=1)[:, None] * a - w @ a)


def khsic_grad_a(a, s, cfg_a: KernelConfig = RBF1, cfg_s: KernelConfig = RBF1) -> np.ndarray:
    """Gradient of :func:`khsic` with respect to ``a``."""
    a, s = _pair(a, s)
    ks = centered_gram(s, cfg_s)
    if cfg_a.kind == "linear":
        # <a a^T, K~_s> / n^2  ->  2 K~_s a / n^2
        return 2.0 * ks @ a / a.shape[0] ** 2
    return khsic_grad_a_from_centered(a, ks, cfg_a.gamma)


def hsic_grad_a(a, s) -> np.ndarray:
    """Gradient of :func:`hsic_linear`; ``2 H S~ S~^T A~`` with ``H`` column centering."""
    a, s = _pair(a, s)
    sc = _column_center(s)
    return _column_center(2.0 * sc @ (sc.T @ _column_center(a)))


def fatr_grad_a(a, s) -> np.ndarray:
    """Gradient of :func:`fatr_orthogonality`, ``2 S S^T A``."""
    a, s = _pair(a, s)
    return 2.0 * s @ (s.T @ a)


# -- probability-gap diagnostic ----------------------------------------------

MAX_ATOMS = 12


def _joint_table(a_labels, s_labels):
    a_labels = np.asarray(a_labels)
    s_labels = np.asarray(s_labels)
    if a_labels.shape != s_labels.shape or a_labels.ndim != 1:
        raise DimensionError("label vectors must be 1-D with equal length")
    a_atoms, ai = np.unique(a_labels, return_inverse=True)
    s_atoms, si = np.unique(s_labels, return_inverse=True)
    if len(a_atoms) > MAX_ATOMS or len(s_atoms) > MAX_ATOMS:
        raise ResourceError(
            f"subset enumeration supports at most {MAX_ATOMS} atoms per variable, "
            f"got {len(a_atoms)} and {len(s_atoms)}"
        )
    joint = np.zeros((len(a_atoms), len(s_atoms)))
    np.add.at(joint, (ai.ravel(), si.ravel()), 1.0)
    return joint / a_labels.size


def independence_gap_bruteforce(a_labels, s_labels) -> float:
    """Largest ``|P(a in U, s in V) - P(a in U) P(s in V)|`` over all atom subsets.

    Uses the empirical distribution placing mass 1/n on each paired sample.
    For a fixed subset ``U`` the best ``V`` collects either all positive or
    all negative entries of the row ``1_U^T (P_joint - p q^T)``, so only the
    subsets of ``a``-atoms are enumerated.
    """
    joint = _joint_table(a_labels, s_labels)
    d = joint - np.outer(joint.sum(axis=1), joint.sum(axis=0))
    na = d.shape[0]
    masks = ((np.arange(2**na)[:, None] >> np.arange(na)) & 1).astype(np.float64)
    rows = masks @ d
    best = np.maximum(np.clip(rows, 0, None).sum(axis=1), -np.clip(rows, None, 0).sum(axis=1))
    return float(best.max())


def independence_gap_ratio(a_labels, s_labels, cfg_a: KernelConfig = RBF1,
                           cfg_s: KernelConfig = RBF1) -> dict:
    """Probability gap next to the kernel criterion on one-hot encodings of the labels.

    Reported as a diagnostic only: whether ``khsic`` bounds the gap for a
    finite bandwidth is not guaranteed.
    """
    gap = independence_gap_bruteforce(a_labels, s_labels)

    def encode(labels):
        _, inv = np.unique(np.asarray(labels), return_inverse=True)
        return np.eye(inv.max() + 1)[inv.ravel()]

    value = khsic(encode(a_labels), encode(s_labels), cfg_a, cfg_s)
    if gap == 0.0:
        ratio = 0.0
    else:
        ratio = gap / value if value > 0 else math.inf
    return {"gap": gap, "khsic": value, "ratio": ratio}
