"""Fairness-regularized block coordinate descent for CP and matrix factorization.

Each epoch takes ``inner_steps`` plain gradient steps on ``A`` (residual plus
fairness penalty), then on ``B``, then on ``C`` (residual only), in that
order. The penalty acts on the sensitive-mode factor ``A`` only.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import kernels
from .errors import DimensionError, DivergenceError
from .kernels import KernelConfig
from .tensor import FactorModel, as_array, gram_hadamard, mttkrp, reconstruct

KINDS = ("none", "khsic", "hsic", "fatr")
REBALANCE = ("none", "bc", "all")
UNITS = ("default", "mean", "sum")

# method name used in the experiments -> regularizer kind
METHODS = {"BCD": "none", "KHSIC": "khsic", "HSIC": "hsic", "FATR": "fatr"}


@dataclass(frozen=True)
class RegularizerSpec:
    """Fairness penalty applied to ``A``.

    ``kind="khsic"`` adds ``lam * khsic(A, S)``, ``kind="hsic"`` adds
    ``lam * hsic_linear(A, S)`` and ``kind="fatr"`` adds
    ``lambda_o * ||A^T S||^2 + lambda_l2 * ||A||^2``.

    ``penalty_units`` rescales the two independence penalties by powers of
    ``n`` (rows of ``A``): "default" uses the forms above, where KHSIC
    carries a ``1/n^2`` and HSIC does not; "mean" divides both by ``n^2``;
    "sum" multiplies KHSIC by ``n^2`` so that neither is normalized. With a
    linear kernel the two penalties then agree in every setting.
    """

    kind: str = "none"
    lam: float = 0.0
    gamma_a: float = 1.0
    gamma_s: float = 1.0
    lambda_o: float = 0.0
    lambda_l2: float = 0.0
    penalty_units: str = "default"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.penalty_units not in UNITS:
            raise ValueError(f"penalty_units must be one of {UNITS}")
        for name in ("lam", "lambda_o", "lambda_l2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (self.gamma_a > 0 and self.gamma_s > 0):
            raise ValueError("kernel bandwidths must be positive")

    @classmethod
    def for_method(cls, method: str, strength: float, **kw) -> "RegularizerSpec":
        """Build the regularizer for an experiment method; ``strength`` is lambda or lambda_o."""
        kind = METHODS[method.upper()]
        if kind == "fatr":
            kw.setdefault("lambda_l2", 1.0)
            return cls(kind=kind, lambda_o=strength, **kw)
        if kind == "none":
            return cls(kind=kind, **kw)
        return cls(kind=kind, lam=strength, **kw)

    @property
    def strength(self) -> float:
        return self.lambda_o if self.kind == "fatr" else self.lam

    def weight(self, n: int) -> float:
        """Multiplier of ``khsic(A, S)`` or ``hsic_linear(A, S)`` in the objective."""
        if self.kind == "khsic" and self.penalty_units == "sum":
            return self.lam * n**2
        if self.kind == "hsic" and self.penalty_units == "mean":
            return self.lam / n**2
        return self.lam


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    rank: int = 8
    inner_steps: int = 200
    lr_a: float = 1e-3
    lr_bc: float = 1e-3
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    seed: int = 0
    normalize_residual: bool = False
    rebalance: str = "none"
    safe_step: bool = False

    def __post_init__(self):
        if self.rebalance not in REBALANCE:
            raise ValueError(f"rebalance must be one of {REBALANCE}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.lr_a < 0 or self.lr_bc < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    residual_term: float
    penalty_term: float
    objective: float


@dataclass
class TraceLog:
    records: List[TraceRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path=None) -> str:
        """CSV with header ``epoch,residual_term,penalty_term,objective``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "residual_term", "penalty_term", "objective"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.residual_term), repr(r.penalty_term), repr(r.objective)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "TraceLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([TraceRecord(int(r["epoch"]), float(r["residual_term"]),
                                float(r["penalty_term"]), float(r["objective"])) for r in rows])


def init_factors(seed: int, dims, rank: int) -> FactorModel:
    """Factors with i.i.d. U[0, 1) entries; ``dims`` has two or three sizes.

    Factors are drawn in mode order from one ``numpy`` generator seeded with
    ``seed``, so equal seeds give bit-identical models.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if len(dims) not in (2, 3):
        raise DimensionError("dims must have 2 or 3 entries")
    rng = np.random.default_rng(seed)
    return FactorModel(*(rng.random((d, rank)) for d in dims))


# -- objective pieces ---------------------------------------------------------

def residual_scale(x: np.ndarray, cfg: TrainConfig) -> float:
    return 1.0 / x.size if cfg.normalize_residual else 1.0


def residual_term(x, model: FactorModel, cfg: TrainConfig) -> float:
    return residual_scale(x, cfg) * float(np.sum((x - reconstruct(model)) ** 2))


def penalty_term(a, s, reg: RegularizerSpec) -> float:
    if reg.kind == "khsic":
        weight = reg.weight(np.shape(a)[0])
        return weight * kernels.khsic(a, s, KernelConfig(reg.gamma_a), KernelConfig(reg.gamma_s))
    if reg.kind == "hsic":
        return reg.weight(np.shape(a)[0]) * kernels.hsic_linear(a, s)
    if reg.kind == "fatr":
        return reg.lambda_o * kernels.fatr_orthogonality(a, s) + reg.lambda_l2 * float(np.sum(a * a))
    return 0.0


def objective(x, s, model: FactorModel, cfg: TrainConfig) -> float:
    """Residual term (optionally divided by the entry count) plus the active penalty."""
    x = as_array(x, name="x")
    s = as_array(s, 2, "s")
    if x.shape != model.shape:
        raise DimensionError(f"data shape {x.shape} does not match model shape {model.shape}")
    return residual_term(x, model, cfg) + penalty_term(model.a, s, cfg.regularizer)


class _Penalty:
    """Penalty gradient with the ``A``-independent parts precomputed."""

    def __init__(self, s: np.ndarray, reg: RegularizerSpec):
        self.reg = reg
        self.weight = reg.weight(s.shape[0])
        self.s = None
        if reg.kind == "khsic":
            self.ks = kernels.centered_gram(s, KernelConfig(reg.gamma_s))
        elif reg.kind == "hsic":
            self.s = s - s.mean(axis=0)
        elif reg.kind == "fatr":
            self.s = s

    def lipschitz(self) -> float:
        """Upper bound on the Lipschitz constant of :meth:`grad`."""
        reg = self.reg
        if reg.kind == "khsic":
            n = self.ks.shape[0]
            # ||Hessian of exp(-g|u|^2)|| <= 2g, summed over the weighted pair graph
            return self.weight * 8.0 * reg.gamma_a / n**2 * float(np.abs(self.ks).sum(axis=1).max())
        if self.s is None:
            return 0.0
        top = 2.0 * float(np.linalg.norm(self.s, 2)) ** 2
        if reg.kind == "hsic":
            return self.weight * top
        return reg.lambda_o * top + 2.0 * reg.lambda_l2

    def _khsic_grad(self, a):
        # Same formula as kernels.khsic_grad_a_from_centered with fewer n x n passes;
        # this runs once per inner step.
        n = a.shape[0]
        sq = np.einsum("ij,ij->i", a, a)
        w = a @ a.T
        w *= 2.0
        w -= sq[:, None]
        w -= sq[None, :]
        np.minimum(w, 0.0, out=w)
        w *= self.reg.gamma_a
        np.exp(w, out=w)
        w *= self.ks
        coef = -4.0 * self.reg.gamma_a * self.weight / n**2
        return coef * (w.sum(axis=1)[:, None] * a - w @ a)

    def grad(self, a: np.ndarray) -> Optional[np.ndarray]:
        reg = self.reg
        if reg.kind == "khsic":
            if self.weight == 0.0:
                return None
            return self._khsic_grad(a)
        if reg.kind == "hsic":
            if self.weight == 0.0:
                return None
            # S~ is centered, so S~ S~^T A~ = S~ S~^T A and is already column centered
            return 2.0 * self.weight * (self.s @ (self.s.T @ a))
        if reg.kind == "fatr":
            return 2.0 * reg.lambda_o * (self.s @ (self.s.T @ a)) + 2.0 * reg.lambda_l2 * a
        return None


def rebalance(model: FactorModel, include_a: bool = False) -> FactorModel:
    """Equalize the column norms of each component across factors.

    The reconstruction is unchanged. With ``include_a=False`` only ``B`` and
    ``C`` are rescaled, which leaves every penalty on ``A`` unchanged too.
    """
    factors = list(model.factors)
    idx = [i for i in range(len(factors)) if include_a or i > 0]
    if len(idx) < 2:
        return model
    norms = np.array([np.linalg.norm(factors[i], axis=0) for i in idx])
    if np.any(norms == 0):
        return model
    target = np.exp(np.mean(np.log(norms), axis=0))
    for i, nrm in zip(idx, norms):
        factors[i] = factors[i] * (target / nrm)
    return FactorModel(*factors)


def _block_steps(x, model, mode, lr, steps, scale, penalty=None, safe=False):
    """``steps`` gradient steps on one factor; the other factors stay fixed.

    With ``safe`` the step is capped at ``1/L`` for ``L`` a bound on the
    gradient's Lipschitz constant over this block.
    """
    f = model.factors[mode].copy()
    if lr == 0.0:
        return f
    # With the other factors fixed the residual gradient is 2 (F G - M).
    g2 = 2.0 * scale * gram_hadamard(model, mode)
    m2 = 2.0 * scale * mttkrp(x, model, mode)
    if safe:
        lip = float(np.linalg.eigvalsh(g2).max())
        if penalty is not None:
            lip += penalty.lipschitz()
        if lip > 0:
            lr = min(lr, 1.0 / lip)
    for _ in range(steps):
        grad = f @ g2 - m2
        if penalty is not None:
            pg = penalty.grad(f)
            if pg is not None:
                grad += pg
        f -= lr * grad
    return f


def fit(x, s, cfg: TrainConfig, init: Optional[FactorModel] = None,
        callback=None) -> Tuple[FactorModel, TraceLog]:
    """Fit a fairness-regularized CP (3-mode ``x``) or matrix (2-mode ``x``) model.

    Parameters
    ----------
    x : ndarray
        Data, shape ``(I, J, K)`` or ``(I, J)``.
    s : ndarray
        Sensitive features, one row per index of the first mode.
    cfg : TrainConfig
    init : FactorModel, optional
        Starting factors. Defaults to ``init_factors(cfg.seed, x.shape, cfg.rank)``.
    callback : callable, optional
        Called as ``callback(epoch, model)`` after every epoch.

    Returns
    -------
    (FactorModel, TraceLog)

    Raises
    ------
    DivergenceError
        When a factor or the objective becomes non-finite.
    """
    x = as_array(x, name="x")
    s = as_array(s, 2, "s")
    if x.ndim not in (2, 3):
        raise DimensionError("x must be a matrix or a 3-mode tensor")
    if s.shape[0] != x.shape[0]:
        raise DimensionError(f"s has {s.shape[0]} rows but the sensitive mode has size {x.shape[0]}")
    model = init if init is not None else init_factors(cfg.seed, x.shape, cfg.rank)
    if model.shape != x.shape or model.rank != cfg.rank:
        raise DimensionError("initial model does not match data shape or rank")

    scale = residual_scale(x, cfg)
    penalty = _Penalty(s, cfg.regularizer)
    trace = TraceLog()
    n_modes = x.ndim
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            for mode in range(n_modes):
                lr = cfg.lr_a if mode == 0 else cfg.lr_bc
                f = _block_steps(x, model, mode, lr, cfg.inner_steps, scale,
                                 penalty if mode == 0 else None, cfg.safe_step)
                if not np.all(np.isfinite(f)):
                    raise DivergenceError(epoch, f"factor {'ABC'[mode]} became non-finite at epoch {epoch}")
                model = model.replace(**{"abc"[mode]: f})
            if cfg.rebalance != "none":
                model = rebalance(model, include_a=cfg.rebalance == "all")
            res = residual_term(x, model, cfg)
            pen = penalty_term(model.a, s, cfg.regularizer)
            obj = res + pen
            if not math.isfinite(obj):
                raise DivergenceError(epoch, f"objective became non-finite at epoch {epoch}")
            trace.records.append(TraceRecord(epoch, res, pen, obj))
            if callback is not None:
                callback(epoch, model)
    return model, trace


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    reg = d.pop("regularizer", {}) or {}
    return TrainConfig(regularizer=RegularizerSpec(**reg), **d)
