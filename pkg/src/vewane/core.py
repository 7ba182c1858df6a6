"""Domain types, time conventions, VE basis evaluation, and dataset validation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

UNVACCINATED = None  # semantic sentinel: vaccination never happens (V = +inf)


class VewaneError(Exception):
    """Base class for all library errors."""


class DatasetValidationError(VewaneError):
    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        lines = "; ".join(str(v) for v in violations[:5])
        more = "" if len(violations) <= 5 else f" (+{len(violations) - 5} more)"
        super().__init__(f"{len(violations)} invalid record(s): {lines}{more}")


class NonIdentifiableError(VewaneError):
    """Model parameters cannot be identified from the data (separation or singular information)."""


class OnlyOneCauseError(VewaneError):
    """All infected participants share the same cause; the cause odds carry no information."""


class NotConvergedError(VewaneError):
    """Optimizer failed to reach the convergence thresholds."""


class Cause(Enum):
    CENSORED = "censored"
    IRRELEVANT = "irrelevant"
    PREVENTABLE = "preventable"


_CAUSE_CODE = {Cause.CENSORED: -1, Cause.IRRELEVANT: 0, Cause.PREVENTABLE: 1}
_CODE_CAUSE = {v: k for k, v in _CAUSE_CODE.items()}


@dataclass(frozen=True)
class EventRecord:
    """One participant: vaccination date (None = never vaccinated), first-event time and cause.

    `strain` labels the infecting strain (1..m) and is only meaningful for
    preventable events when strains are modeled.
    """

    id: str
    vax_time: float | None
    event_time: float
    cause: Cause
    strain: int | None = None


@dataclass(frozen=True)
class Violation:
    index: int
    field: str
    reason: str

    def __str__(self) -> str:
        return f"record {self.index}: {self.field}: {self.reason}"


@dataclass(frozen=True)
class VEBasisSpec:
    """Finite basis psi(tau) for the log hazard ratio f(tau) = beta' psi(tau).

    kinds:
      constant  d=1  psi = (1,)
      linear    d=2  psi = (1, tau)
      ramp      d=3  psi = (1{tau<r}, 1{tau>=r}, 1{tau>=r}*(tau-r))
    """

    kind: str
    ramp_length: float | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "ramp"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == "ramp":
            if self.ramp_length is None or not (self.ramp_length > 0):
                raise ValueError("ramp basis requires ramp_length > 0")
        elif self.ramp_length is not None:
            raise ValueError(f"ramp_length is only meaningful for kind='ramp'")

    @property
    def dimension(self) -> int:
        return {"constant": 1, "linear": 2, "ramp": 3}[self.kind]

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.ramp_length is not None:
            d["ramp_length"] = self.ramp_length
        return d

    @staticmethod
    def from_dict(d: dict) -> "VEBasisSpec":
        return VEBasisSpec(kind=d["kind"], ramp_length=d.get("ramp_length"))


def eval_ve_basis(spec: VEBasisSpec, tau) -> np.ndarray:
    """Evaluate psi(tau); tau may be a scalar or array, output shape (..., d)."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0) or np.any(~np.isfinite(tau)):
        raise ValueError("tau must be finite and >= 0")
    if spec.kind == "constant":
        out = np.ones(tau.shape + (1,))
    elif spec.kind == "linear":
        out = np.stack([np.ones_like(tau), tau], axis=-1)
    else:
        r = spec.ramp_length
        pre = (tau < r).astype(float)
        post = 1.0 - pre
        out = np.stack([pre, post, post * (tau - r)], axis=-1)
    return out


def f_value(beta, spec: VEBasisSpec, tau):
    """Log hazard ratio beta' psi(tau); scalar in, scalar out."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (spec.dimension,):
        raise ValueError(f"beta has dim {beta.shape}, basis needs ({spec.dimension},)")
    val = eval_ve_basis(spec, tau) @ beta
    return float(val) if val.ndim == 0 else val


def ve_from_f(f):
    """VE = 1 - exp(f); may be negative when the effect is harmful."""
    f = np.asarray(f, dtype=float)
    if np.any(~np.isfinite(f)):
        raise ValueError("f must be finite")
    out = 1.0 - np.exp(f)
    return float(out) if out.ndim == 0 else out


@dataclass
class Dataset:
    """Validated cohort of first-event records on a common calendar scale."""

    records: list[EventRecord]
    horizon: float
    time_unit: str = "years"
    _arrays: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def arrays(self) -> dict:
        """Columnar view: vax (nan = unvaccinated), time, cause code (-1/0/1), strain (0 = none)."""
        if self._arrays is None:
            n = len(self.records)
            vax = np.full(n, np.nan)
            time = np.empty(n)
            cause = np.empty(n, dtype=np.int64)
            strain = np.zeros(n, dtype=np.int64)
            for i, r in enumerate(self.records):
                if r.vax_time is not None:
                    vax[i] = r.vax_time
                time[i] = r.event_time
                cause[i] = _CAUSE_CODE[r.cause]
                if r.strain is not None:
                    strain[i] = r.strain
            self._arrays = {"vax": vax, "time": time, "cause": cause, "strain": strain}
        return self._arrays


def check_records(records: Sequence[EventRecord], horizon: float) -> list[Violation]:
    """All invariant violations, one entry per offending field."""
    violations: list[Violation] = []
    seen: set[str] = set()
    for i, r in enumerate(records):
        if r.id in seen:
            violations.append(Violation(i, "id", f"duplicate id {r.id!r}"))
        seen.add(r.id)
        if not math.isfinite(r.event_time) or r.event_time < 0:
            violations.append(Violation(i, "event_time", "negative event_time"))
        elif r.event_time > horizon:
            violations.append(Violation(i, "event_time", "event_time exceeds horizon"))
        if r.vax_time is not None and (not math.isfinite(r.vax_time) or r.vax_time < 0):
            violations.append(Violation(i, "vax_time", "negative vax_time"))
        if r.strain is not None and r.cause is not Cause.PREVENTABLE:
            violations.append(Violation(i, "strain", "strain on non-preventable cause"))
    return violations


def validate_dataset(
    records: Sequence[EventRecord], horizon: float, time_unit: str = "years"
) -> Dataset:
    """Build a Dataset, raising DatasetValidationError (with the violation list) when invalid."""
    violations = check_records(records, horizon)
    if violations:
        raise DatasetValidationError(violations)
    return Dataset(records=list(records), horizon=horizon, time_unit=time_unit)


def convert_to_years(dataset: Dataset, days_per_year: float = 365.0) -> Dataset:
    """Rescale a day-denominated dataset to years (the internal analysis scale)."""
    if dataset.time_unit == "years":
        return dataset
    records = [
        EventRecord(
            id=r.id,
            vax_time=None if r.vax_time is None else r.vax_time / days_per_year,
            event_time=r.event_time / days_per_year,
            cause=r.cause,
            strain=r.strain,
        )
        for r in dataset.records
    ]
    return Dataset(records=records, horizon=dataset.horizon / days_per_year, time_unit="years")


# -- events CSV (header: id,vax_time,event_time,cause,strain) --


def write_events_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "vax_time", "event_time", "cause", "strain"])
        for r in dataset.records:
            w.writerow(
                [
                    r.id,
                    "" if r.vax_time is None else repr(r.vax_time),
                    repr(r.event_time),
                    r.cause.value,
                    "" if r.strain is None else r.strain,
                ]
            )


def read_events_csv(path, horizon: float | None = None, time_unit: str = "years") -> Dataset:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "vax_time", "event_time", "cause"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DatasetValidationError(
                [Violation(-1, "header", f"events CSV needs columns {sorted(required)}")]
            )
        for row in reader:
            vax = row["vax_time"].strip()
            strain = (row.get("strain") or "").strip()
            try:
                cause = Cause(row["cause"].strip())
            except ValueError:
                raise DatasetValidationError(
                    [Violation(len(records), "cause", f"unknown cause {row['cause']!r}")]
                ) from None
            records.append(
                EventRecord(
                    id=row["id"],
                    vax_time=float(vax) if vax else None,
                    event_time=float(row["event_time"]),
                    cause=cause,
                    strain=int(strain) if strain else None,
                )
            )
    if horizon is None:
        horizon = max((r.event_time for r in records), default=0.0)
    return validate_dataset(records, horizon, time_unit)


@dataclass
class FitResult:
    """A fitted VE model: beta, its covariance, the nuisance representation, diagnostics.

    For multinomial fits `beta` stacks the per-strain coefficient blocks in
    `strains` order and `basis` is the matching list of per-strain bases.
    """

    method: str
    beta: np.ndarray
    beta_cov: np.ndarray
    basis: VEBasisSpec | list[VEBasisSpec]
    nuisance: object = None
    diagnostics: dict = field(default_factory=dict)
    strains: list[int] | None = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.beta_cov = np.asarray(self.beta_cov, dtype=float)
        d = self.beta.shape[0]
        if self.beta_cov.shape != (d, d):
            raise ValueError("beta_cov shape inconsistent with beta")

    def strain_block(self, strain: int) -> tuple[np.ndarray, np.ndarray, VEBasisSpec]:
        """(beta_s, cov_s, basis_s) for one strain of a multinomial fit."""
        if self.strains is None:
            raise ValueError("not a multinomial fit")
        if strain not in self.strains:
            raise ValueError(f"strain {strain} not in fit (has {self.strains})")
        k = self.strains.index(strain)
        dims = [b.dimension for b in self.basis]
        lo = sum(dims[:k])
        hi = lo + dims[k]
        return self.beta[lo:hi], self.beta_cov[lo:hi, lo:hi], self.basis[k]

    def to_dict(self) -> dict:
        basis = self.basis
        basis_d = [b.to_dict() for b in basis] if isinstance(basis, list) else basis.to_dict()
        nuis = self.nuisance.to_dict() if hasattr(self.nuisance, "to_dict") else self.nuisance
        diagnostics = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in self.diagnostics.items()
        }
        return {
            "method": self.method,
            "beta": self.beta.tolist(),
            "beta_cov": self.beta_cov.tolist(),
            "basis": basis_d,
            "strains": self.strains,
            "nuisance": nuis,
            "diagnostics": diagnostics,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @staticmethod
    def from_dict(d: dict) -> "FitResult":
        from . import smoothing

        basis_d = d["basis"]
        if isinstance(basis_d, list):
            basis = [VEBasisSpec.from_dict(b) for b in basis_d]
        else:
            basis = VEBasisSpec.from_dict(basis_d)
        nuis = d.get("nuisance")
        if isinstance(nuis, dict) and "smooth_fn" in nuis:
            nuis = smoothing.smooth_fn_from_dict(nuis)
        return FitResult(
            method=d["method"],
            beta=np.asarray(d["beta"], dtype=float),
            beta_cov=np.asarray(d["beta_cov"], dtype=float),
            basis=basis,
            nuisance=nuis,
            diagnostics=d.get("diagnostics", {}),
            strains=d.get("strains"),
        )

    @staticmethod
    def load(path) -> "FitResult":
        with open(path) as fh:
            return FitResult.from_dict(json.load(fh))
