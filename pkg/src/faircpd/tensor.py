"""Dense CP-model algebra: reconstruction, unfoldings and residual gradients.

Tensors and matrices are plain float64 numpy arrays. A 3-mode tensor has
shape ``(I, J, K)``; a matrix has shape ``(rows, cols)``.

Unfolding convention
--------------------
The mode-1 unfolding of ``X`` is the ``I x (J*K)`` matrix with

    X_(1)[i, k*J + j] = X[i, j, k]

so that ``reconstruct(A, B, C)`` unfolds to ``A @ khatri_rao(C, B).T``.
The mode-2 and mode-3 unfoldings follow the same rule cyclically
(``X_(2)[j, k*I + i]`` and ``X_(3)[k, j*I + i]``). Every routine in this
package uses these definitions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError, InvalidModeError

MODES = ("A", "B", "C")


def as_array(x, ndim=None, name="array"):
    """Return ``x`` as a float64 array, checking rank and finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class FactorModel:
    """Rank-R CP model ``[[A, B, C]]``; with ``c=None`` it is the matrix model ``A @ B.T``.

    ``a`` belongs to the sensitive mode: its rows are the entity embeddings
    audited for fairness.
    """

    a: np.ndarray
    b: np.ndarray
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        a = as_array(self.a, 2, "a")
        b = as_array(self.b, 2, "b")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if a.shape[1] != b.shape[1]:
            raise DimensionError(f"rank mismatch: a has {a.shape[1]} columns, b has {b.shape[1]}")
        if self.c is not None:
            c = as_array(self.c, 2, "c")
            if c.shape[1] != a.shape[1]:
                raise DimensionError(
                    f"rank mismatch: a has {a.shape[1]} columns, c has {c.shape[1]}"
                )
            object.__setattr__(self, "c", c)
        if a.shape[1] < 1:
            raise DimensionError("rank must be at least 1")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def is_matrix(self) -> bool:
        return self.c is None

    @property
    def shape(self) -> tuple:
        if self.c is None:
            return (self.a.shape[0], self.b.shape[0])
        return (self.a.shape[0], self.b.shape[0], self.c.shape[0])

    @property
    def factors(self) -> tuple:
        return (self.a, self.b) if self.c is None else (self.a, self.b, self.c)

    def replace(self, **kw) -> "FactorModel":
        fields = {"a": self.a, "b": self.b, "c": self.c}
        fields.update(kw)
        return FactorModel(**fields)

    def copy(self) -> "FactorModel":
        return FactorModel(*(f.copy() for f in self.factors))


def reconstruct(model: FactorModel) -> np.ndarray:
    """Dense array represented by ``model``.

    Entry ``(i, j, k)`` is ``sum_r A[i,r] B[j,r] C[k,r]``; for a matrix model
    the result is ``A @ B.T``.
    """
    if model.c is None:
        return model.a @ model.b.T
    i, j, k = model.shape
    return (model.a @ khatri_rao(model.c, model.b).T).reshape(i, k, j).transpose(0, 2, 1)


def khatri_rao(u, v) -> np.ndarray:
    """Column-wise Kronecker product; row ``p*v.rows + q`` is ``u[p] * v[q]``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2:
        raise DimensionError("khatri_rao expects two matrices")
    if u.shape[1] != v.shape[1]:
        raise DimensionError(f"column mismatch: {u.shape[1]} vs {v.shape[1]}")
    return (u[:, None, :] * v[None, :, :]).reshape(-1, u.shape[1])


def mode1_unfold(x) -> np.ndarray:
    """``I x (K*J)`` unfolding with ``X_(1)[i, k*J + j] = X[i, j, k]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected a 3-mode tensor, got shape {x.shape}")
    i, j, k = x.shape
    return x.transpose(0, 2, 1).reshape(i, k * j)


def mode1_refold(m, shape) -> np.ndarray:
    """Inverse of :func:`mode1_unfold`."""
    i, j, k = shape
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (i, k * j):
        raise DimensionError(f"cannot refold {m.shape} into {shape}")
    return m.reshape(i, k, j).transpose(0, 2, 1)


def unfold(x, mode: int) -> np.ndarray:
    """Unfolding along ``mode`` (0, 1 or 2); columns follow the cyclic convention."""
    x = np.asarray(x, dtype=np.float64)
    if mode == 0:
        return mode1_unfold(x)
    if mode == 1:
        # X_(2)[j, k*I + i]
        return x.transpose(1, 2, 0).reshape(x.shape[1], -1)
    if mode == 2:
        # X_(3)[k, j*I + i]
        return x.transpose(2, 1, 0).reshape(x.shape[2], -1)
    raise InvalidModeError(f"mode must be 0, 1 or 2, got {mode}")


def _mode_index(model: FactorModel, mode) -> int:
    idx = MODES.index(mode) if mode in MODES else mode
    if idx not in (0, 1, 2):
        raise InvalidModeError(f"unknown mode {mode!r}")
    if idx == 2 and model.c is None:
        raise InvalidModeError("mode C requested on a matrix (2-mode) model")
    return idx


def _check_shapes(x: np.ndarray, model: FactorModel):
    if x.shape != model.shape:
        raise DimensionError(f"data shape {x.shape} does not match model shape {model.shape}")


def mttkrp(x, model: FactorModel, mode) -> np.ndarray:
    """Data side of the residual gradient: ``X_(n)`` times the Khatri-Rao product of
    the other factors (``X @ B`` or ``X.T @ A`` for matrix models)."""
    x = np.asarray(x, dtype=np.float64)
    idx = _mode_index(model, mode)
    if model.c is None:
        return x @ model.b if idx == 0 else x.T @ model.a
    a, b, c = model.factors
    if idx == 0:
        return mode1_unfold(x) @ khatri_rao(c, b)
    if idx == 1:
        return unfold(x, 1) @ khatri_rao(c, a)
    return unfold(x, 2) @ khatri_rao(b, a)


def gram_hadamard(model: FactorModel, mode) -> np.ndarray:
    """Hadamard product of the Gram matrices of all factors except ``mode``."""
    idx = _mode_index(model, mode)
    g = np.ones((model.rank, model.rank))
    for n, f in enumerate(model.factors):
        if n != idx:
            g = g * (f.T @ f)
    return g


def residual_grad(x, model: FactorModel, mode, normalize: bool = False) -> np.ndarray:
    """Gradient of ``||X - [[A, B, C]]||_F^2`` with respect to one factor.

    Parameters
    ----------
    x : ndarray
        Data tensor or matrix matching ``model.shape``.
    model : FactorModel
    mode : {"A", "B", "C"} or {0, 1, 2}
    normalize : bool
        Divide the squared residual by the number of entries of ``x``.

    Returns
    -------
    ndarray with the shape of the selected factor.
    """
    x = as_array(x, name="x")
    idx = _mode_index(model, mode)
    _check_shapes(x, model)
    f = model.factors[idx]
    g = 2.0 * (f @ gram_hadamard(model, idx) - mttkrp(x, model, idx))
    if normalize:
        g /= x.size
    return g


def squared_residual(x, model: FactorModel) -> float:
    x = as_array(x, name="x")
    _check_shapes(x, model)
    return float(np.sum((x - reconstruct(model)) ** 2))


def relative_residual(x, model: FactorModel) -> float:
    """``||X - reconstruct(model)||_F / ||X||_F``."""
    x = as_array(x, name="x")
    _check_shapes(x, model)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise DegenerateInputError("relative residual undefined for an all-zero tensor")
    return float(np.linalg.norm(x - reconstruct(model)) / norm)


# -- serialization -----------------------------------------------------------

def save_array(path, x) -> None:
    """Write ``x`` in the text array format.

    The first line is ``dims: d1 d2 [d3]``; every following line holds one
    row-major value printed with 17 significant digits, so a save/load round
    trip is exact.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise DimensionError("only matrices and 3-mode tensors are serializable")
    with open(path, "w") as fh:
        fh.write("dims: " + " ".join(str(d) for d in x.shape) + "\n")
        np.savetxt(fh, x.reshape(-1), fmt="%.17g")


def load_array(path) -> np.ndarray:
    """Read an array written by :func:`save_array`."""
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    if not header.startswith("dims:"):
        raise FormatError(f"{path}: missing 'dims:' header")
    try:
        dims = tuple(int(d) for d in header[len("dims:"):].split())
    except ValueError as exc:
        raise FormatError(f"{path}: bad dims header {header!r}") from exc
    if len(dims) not in (2, 3) or any(d <= 0 for d in dims):
        raise FormatError(f"{path}: bad dims {dims}")
    values = np.array(body.split(), dtype=np.float64)
    if values.size != int(np.prod(dims)):
        raise FormatError(f"{path}: expected {int(np.prod(dims))} values, found {values.size}")
    return values.reshape(dims)


def save_model(directory, model: FactorModel) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, f in zip("abc", model.factors):
        save_array(directory / f"factor_{name}.txt", f)


def load_model(directory) -> FactorModel:
    directory = Path(directory)
    c_path = directory / "factor_c.txt"
    c = load_array(c_path) if c_path.exists() else None
    return FactorModel(load_array(directory / "factor_a.txt"), load_array(directory / "factor_b.txt"), c)
