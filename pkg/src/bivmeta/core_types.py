"""Study-level data model, dataset I/O and the log odds ratio transform."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_COLUMNS = ("study_id", "n_ctrl", "r1_ctrl", "r2_ctrl", "n_trt", "r1_trt", "r2_trt")
# Optional trailing columns: outcome-2 arm sizes when they differ from outcome 1.
CSV_OPTIONAL = ("n2_ctrl", "n2_trt")


class SchemaError(ValueError):
    """The dataset file does not follow the CSV schema."""


class ValidationError(ValueError):
    """A record violates a count or uniqueness constraint."""


@dataclass(frozen=True)
class StudyRecord:
    """Event counts on two binary outcomes in a two-arm study.

    ``n_ctrl``/``n_trt`` are the arm sizes for outcome 1. ``n2_ctrl`` and
    ``n2_trt`` hold outcome-2 arm sizes when a trial reported the outcomes
    on different denominators; they default to the outcome-1 sizes.
    """

    study_id: str
    n_ctrl: int
    r1_ctrl: int
    r2_ctrl: int
    n_trt: int
    r1_trt: int
    r2_trt: int
    n2_ctrl: int | None = None
    n2_trt: int | None = None

    def __post_init__(self):
        for name in ("n_ctrl", "r1_ctrl", "r2_ctrl", "n_trt", "r1_trt", "r2_trt"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.n2_ctrl is None:
            object.__setattr__(self, "n2_ctrl", self.n_ctrl)
        if self.n2_trt is None:
            object.__setattr__(self, "n2_trt", self.n_trt)
        object.__setattr__(self, "n2_ctrl", int(self.n2_ctrl))
        object.__setattr__(self, "n2_trt", int(self.n2_trt))
        self.validate()

    def validate(self) -> None:
        for n in (self.n_ctrl, self.n_trt, self.n2_ctrl, self.n2_trt):
            if n < 1:
                raise ValidationError(f"{self.study_id}: arm sizes must be positive")
        checks = (
            ("r1_ctrl", self.r1_ctrl, self.n_ctrl),
            ("r2_ctrl", self.r2_ctrl, self.n2_ctrl),
            ("r1_trt", self.r1_trt, self.n_trt),
            ("r2_trt", self.r2_trt, self.n2_trt),
        )
        for name, r, n in checks:
            if not 0 <= r <= n:
                raise ValidationError(
                    f"{self.study_id}: {name}={r} outside [0, {n}]"
                )

    def outcome_table(self, outcome: int) -> tuple[int, int, int, int]:
        """(r_trt, n_trt, r_ctrl, n_ctrl) for outcome 1 or 2."""
        if outcome == 1:
            return self.r1_trt, self.n_trt, self.r1_ctrl, self.n_ctrl
        if outcome == 2:
            return self.r2_trt, self.n2_trt, self.r2_ctrl, self.n2_ctrl
        raise ValueError("outcome must be 1 or 2")

    def swap_arms(self) -> "StudyRecord":
        return StudyRecord(
            self.study_id,
            self.n_trt, self.r1_trt, self.r2_trt,
            self.n_ctrl, self.r1_ctrl, self.r2_ctrl,
            self.n2_trt, self.n2_ctrl,
        )

    @property
    def equal_denominators(self) -> bool:
        return self.n2_ctrl == self.n_ctrl and self.n2_trt == self.n_trt


@dataclass(frozen=True)
class LogOrSummary:
    y1: float
    y2: float
    var1: float
    var2: float
    rho_w: float
    corrected: bool = False

    def __post_init__(self):
        if not (self.var1 > 0 and self.var2 > 0):
            raise ValidationError("within-study variances must be positive")
        if not -1.0 <= self.rho_w <= 1.0:
            raise ValidationError(f"rho_w={self.rho_w} outside [-1, 1]")


@dataclass(frozen=True)
class BetweenStudyState:
    """Constrained-space view of a parameter vector."""

    d1: float
    d2: float
    tau1: float
    tau2: float
    z: float
    delta1: np.ndarray
    delta2: np.ndarray
    mu1: np.ndarray | None = None
    mu2: np.ndarray | None = None
    theta_ctrl: float | None = None
    theta_trt: float | None = None

    @property
    def rho_b(self) -> float:
        return math.tanh(self.z)

    def covariance(self) -> np.ndarray:
        off = self.tau1 * self.tau2 * self.rho_b
        cov = np.array([[self.tau1**2, off], [off, self.tau2**2]])
        assert np.linalg.eigvalsh(cov).min() >= -1e-12
        return cov


@dataclass(frozen=True)
class ArmDependence:
    """Frank dependence parameters for the two arms of a study.

    With ``source="informative_prior"`` the thetas are sampled and
    ``prior_ctrl``/``prior_trt`` carry (mean, sd) of normal priors; the
    theta fields then act as starting values.
    """

    theta_ctrl: float = 0.0
    theta_trt: float = 0.0
    source: str = "fixed"
    prior_ctrl: tuple[float, float] | None = None
    prior_trt: tuple[float, float] | None = None

    def __post_init__(self):
        if self.source not in ("fixed", "informative_prior"):
            raise ValueError(f"unknown dependence source {self.source!r}")
        if self.source == "informative_prior":
            if self.prior_ctrl is None or self.prior_trt is None:
                raise ValueError("informative_prior requires prior_ctrl and prior_trt")
            for _, sd in (self.prior_ctrl, self.prior_trt):
                if not sd > 0:
                    raise ValueError("prior sd must be positive")


@dataclass
class PosteriorSummary:
    parameter: str
    mean: float
    median: float
    sd: float
    ci_low: float
    ci_high: float
    rhat: float = float("nan")
    ess: float = float("nan")
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_int(value: str, row: int, column: str) -> int:
    try:
        return int(value.strip())
    except (ValueError, AttributeError):
        raise SchemaError(f"row {row}, column {column!r}: expected integer, got {value!r}")


def parse_dataset(text: str) -> list[StudyRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise SchemaError("dataset is empty: no header and zero records")
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = [h.strip() for h in next(reader)]
    if tuple(header[: len(CSV_COLUMNS)]) != CSV_COLUMNS:
        raise SchemaError(f"header must start with {','.join(CSV_COLUMNS)}; got {','.join(header)}")
    extra = tuple(header[len(CSV_COLUMNS):])
    if extra not in ((), CSV_OPTIONAL):
        raise SchemaError(f"unexpected columns {extra}; optional columns are {CSV_OPTIONAL}")

    records: list[StudyRecord] = []
    seen: set[str] = set()
    for row_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise SchemaError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
        values = dict(zip(header, row))
        sid = values["study_id"].strip()
        if not sid:
            raise SchemaError(f"row {row_no}, column 'study_id': empty")
        if sid in seen:
            raise ValidationError(f"{sid}: duplicate study_id")
        seen.add(sid)
        ints = {c: _parse_int(values[c], row_no, c) for c in header[1:]}
        records.append(StudyRecord(study_id=sid, **ints))
    return records


def load_dataset(path: str | Path) -> list[StudyRecord]:
    return parse_dataset(Path(path).read_text(encoding="utf-8"))


def dump_dataset(records: Sequence[StudyRecord], header_comment: str | None = None) -> str:
    out = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            out.write(f"# {line}\n")
    extended = any(not r.equal_denominators for r in records)
    cols = CSV_COLUMNS + (CSV_OPTIONAL if extended else ())
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(cols)
    for r in records:
        writer.writerow([getattr(r, c) for c in cols])
    return out.getvalue()


def save_dataset(records: Sequence[StudyRecord], path: str | Path, header_comment: str | None = None) -> None:
    Path(path).write_text(dump_dataset(records, header_comment), encoding="utf-8")


def bundled_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def load_cml() -> list[StudyRecord]:
    """The ten CML trials (CCyR at 12 months, event-free at 24 months)."""
    return load_dataset(bundled_path("cml.csv"))


def log_odds_ratio(r_trt: float, n_trt: float, r_ctrl: float, n_ctrl: float) -> tuple[float, float, bool]:
    """Log OR of treatment vs control and its variance.

    Adds 0.5 to all four cells when any cell is empty.
    """
    cells = (r_trt, n_trt - r_trt, r_ctrl, n_ctrl - r_ctrl)
    corrected = min(cells) <= 0
    if corrected:
        cells = tuple(c + 0.5 for c in cells)
    a, b, c, d = cells
    y = math.log(a / b) - math.log(c / d)
    var = 1 / a + 1 / b + 1 / c + 1 / d
    return y, var, corrected


def to_log_or(rec: StudyRecord, rho_w: float) -> LogOrSummary:
    if not -1.0 <= rho_w <= 1.0:
        raise ValidationError(f"rho_w={rho_w} outside [-1, 1]")
    y1, v1, c1 = log_odds_ratio(*rec.outcome_table(1))
    y2, v2, c2 = log_odds_ratio(*rec.outcome_table(2))
    return LogOrSummary(y1, y2, v1, v2, float(rho_w), c1 or c2)


def summaries_to_json(summaries: Iterable[PosteriorSummary], **extra) -> str:
    payload = [s.to_dict() for s in summaries]
    if extra:
        return json.dumps({"summaries": payload, **extra}, indent=2, default=_json_default)
    return json.dumps(payload, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
