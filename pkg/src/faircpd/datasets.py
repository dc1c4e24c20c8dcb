"""Data sources: the two-population synthetic tensor, the orthogonal-but-unfair
counterexample, and the UCI contraceptive-method-choice (CMC) matrix."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError
from .tensor import FactorModel, load_array, reconstruct, save_array

CMC_ROWS = 1473
CMC_FEATURES = 9
CMC_WORKING_RATE = 0.749
# 0-based index of "wife now working?" among the nine CMC attributes
CMC_WORKING_COLUMN = 5
CMC_ENV = "FAIRCPD_CMC_PATH"


def one_hot(labels) -> np.ndarray:
    """Two-column group matrix ``[labels, 1 - labels]`` for binary labels."""
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary 0/1")
    lab = labels.astype(np.float64)
    return np.column_stack([lab, 1.0 - lab])


@dataclass
class LabeledDataset:
    x: np.ndarray
    s: np.ndarray
    labels: np.ndarray
    provenance: str = ""
    truth: Optional[FactorModel] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.x.shape[0]
        if self.s.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("s rows, labels and the sensitive mode must have equal length")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def save(self, directory) -> None:
        """Write ``x.txt``, ``s.txt`` (array format) and a ``meta.json`` sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_array(directory / "x.txt", self.x)
        save_array(directory / "s.txt", self.s)
        meta = dict(self.meta, provenance=self.provenance, labels=self.labels.tolist())
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "LabeledDataset":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        labels = meta.pop("labels")
        provenance = meta.pop("provenance", "")
        return cls(load_array(directory / "x.txt"), load_array(directory / "s.txt"),
                   np.array(labels), provenance, meta=meta)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the two-population tensor.

    Half the rows of the true sensitive-mode factor are Gaussian with mean
    ``[1, 2, ..., true_rank]`` and variances ``1, (r-1)/r, ..., 1/r``; the
    other half, and every entry of the other two factors, are U[0, 1).
    """

    n_sensitive: int = 200
    dim_b: int = 100
    dim_c: int = 100
    true_rank: int = 10
    fit_rank: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_sensitive < 2 or self.n_sensitive % 2:
            raise ValueError("n_sensitive must be an even number >= 2")
        if min(self.dim_b, self.dim_c, self.true_rank, self.fit_rank) < 1:
            raise ValueError("dimensions and ranks must be positive")

    @classmethod
    def small(cls, seed: int = 0) -> "SyntheticSpec":
        """Desk-scale version: 60 x 30 x 30, true rank 6, fit rank 5."""
        return cls(60, 30, 30, 6, 5, seed)

    @property
    def mean(self) -> np.ndarray:
        return np.arange(1, self.true_rank + 1, dtype=np.float64)

    @property
    def variances(self) -> np.ndarray:
        r = self.true_rank
        return (r - np.arange(r)) / r


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> LabeledDataset:
    """Generate the two-population tensor; label 1 marks the Gaussian rows (the first half)."""
    rng = np.random.default_rng(spec.seed)
    half = spec.n_sensitive // 2
    r = spec.true_rank
    gauss = spec.mean + np.sqrt(spec.variances) * rng.standard_normal((half, r))
    unif = rng.random((half, r))
    a = np.vstack([gauss, unif])
    b = rng.random((spec.dim_b, r))
    c = rng.random((spec.dim_c, r))
    truth = FactorModel(a, b, c)
    labels = np.r_[np.ones(half, dtype=np.int64), np.zeros(half, dtype=np.int64)]
    return LabeledDataset(
        reconstruct(truth), one_hot(labels), labels,
        provenance=f"synthetic two-population tensor {asdict(spec)}",
        truth=truth, meta={"spec": asdict(spec)},
    )


def counterexample(width: int = 2):
    """Factor ``A`` (6 x width) orthogonal to every column of ``S`` (6 x 2)
    although ``|A[:, 0]| > 0`` identifies the group exactly."""
    if width < 1:
        raise ValueError("width must be >= 1")
    a = np.zeros((6, width))
    a[:, 0] = [1, 0, 0, -1, -1, 1]
    s = np.array([[1, 0], [0, 1], [0, 1], [1, 0], [1, 0], [1, 0]], dtype=np.float64)
    return a, s


def counterexample_dataset(width: int = 2) -> LabeledDataset:
    """The counterexample as a 6 x 6 matrix problem ``X = A A^T``, labels ``S[:, 0]``."""
    a, s = counterexample(width)
    return LabeledDataset(a @ a.T, s, s[:, 0].astype(np.int64),
                          provenance="orthogonal-but-separable counterexample")


def parse_cmc(text: str) -> np.ndarray:
    """Parse the UCI CMC file: comma-separated integers, 10 per line, no header."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        fields = line.split(",")
        if len(fields) != CMC_FEATURES + 1:
            raise FormatError(f"line {lineno}: expected {CMC_FEATURES + 1} fields, got {len(fields)}")
        try:
            rows.append([int(f) for f in fields])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: non-integer field in {line!r}") from exc
    if len(rows) != CMC_ROWS:
        raise FormatError(f"expected {CMC_ROWS} rows, got {len(rows)}")
    return np.array(rows, dtype=np.int64)


def default_cmc_path() -> Optional[Path]:
    """Location of ``cmc.data``: ``$FAIRCPD_CMC_PATH`` or the copy shipped with the tests."""
    env = os.environ.get(CMC_ENV)
    if env:
        return Path(env)
    bundled = Path(__file__).resolve().parents[2] / "tests" / "data" / "cmc.data"
    return bundled if bundled.exists() else None


def load_contraceptive(path=None, sensitive_column: int = CMC_WORKING_COLUMN,
                       drop_sensitive_from_x: bool = False,
                       expected_rate: float = CMC_WORKING_RATE,
                       rate_tolerance: float = 0.005) -> LabeledDataset:
    """Load the CMC data as a 1473 x 9 matrix with a binary sensitive attribute.

    The class column is dropped. The sensitive column is binary; the code
    whose frequency matches ``expected_rate`` (within ``rate_tolerance``)
    becomes label 1 ("working"). The chosen code and the observed rate are
    stored in ``meta``.
    """
    if path is None:
        path = default_cmc_path()
        if path is None:
            raise FileNotFoundError(f"no CMC file given; set {CMC_ENV} or pass a path")
    raw = parse_cmc(Path(path).read_text())
    attrs = raw[:, :CMC_FEATURES]
    col = attrs[:, sensitive_column]
    codes = np.unique(col)
    if codes.size != 2:
        raise FormatError(f"column {sensitive_column} is not binary: codes {codes.tolist()}")
    rates = {int(c): float(np.mean(col == c)) for c in codes}
    positive = min(rates, key=lambda c: abs(rates[c] - expected_rate))
    if abs(rates[positive] - expected_rate) > rate_tolerance:
        raise FormatError(
            f"no code of column {sensitive_column} occurs at rate {expected_rate}: {rates}"
        )
    labels = (col == positive).astype(np.int64)
    x = attrs.astype(np.float64)
    if drop_sensitive_from_x:
        x = np.delete(x, sensitive_column, axis=1)
    meta = {
        "sensitive_column": sensitive_column,
        "positive_code": positive,
        "working_rate": rates[positive],
        "drop_sensitive_from_x": drop_sensitive_from_x,
    }
    return LabeledDataset(
        x, one_hot(labels), labels,
        provenance=f"UCI CMC from {path}; label 1 = code {positive} of column {sensitive_column}",
        meta=meta,
    )
