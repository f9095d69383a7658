"""CSV ingestion, report tables and small file utilities for the command line.

Report numbers are printed with three decimals in CSV and markdown and with
full ``repr`` precision in JSON.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass
from importlib import resources
from io import StringIO
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError
from .models import Dataset, Family

FORMATS = ("csv", "markdown", "json")
FIT_COLUMNS = ("Est.", "SE", "Robust SE", "Bayes Est.", "Post. SD", "BRSE")


@dataclass(frozen=True)
class Formula:
    """Which CSV columns feed the model.

    ``average`` names two or more columns whose row mean is the outcome (for
    example repeated blood pressure readings); it replaces ``outcome``.
    Survival data use ``time`` and ``event`` instead of an outcome.
    """

    outcome: Optional[str] = None
    covariates: tuple[str, ...] = ()
    intercept: bool = True
    event: Optional[str] = None
    time: Optional[str] = None
    average: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "average", tuple(self.average))
        survival = self.event is not None or self.time is not None
        if survival:
            if self.event is None or self.time is None:
                raise DataError("survival data need both an event and a time column")
            if self.outcome is not None or self.average:
                raise DataError("survival data take time/event columns, not an outcome")
        else:
            if (self.outcome is None) == (not self.average):
                raise DataError("give exactly one of an outcome column or columns to average")
            if len(self.average) == 1:
                raise DataError("averaging needs at least two columns")
        if not self.intercept and not self.covariates:
            raise DataError("the design has no columns: add covariates or an intercept")

    @property
    def is_survival(self) -> bool:
        return self.event is not None

    @property
    def referenced(self) -> tuple[str, ...]:
        cols = list(self.average) if self.average else [self.outcome] if self.outcome else []
        if self.is_survival:
            cols += [self.time, self.event]
        return tuple(cols) + self.covariates

    @property
    def term_names(self) -> tuple[str, ...]:
        return (("(Intercept)",) if self.intercept else ()) + self.covariates


@dataclass(frozen=True)
class Ingested:
    data: Dataset
    term_names: tuple[str, ...]
    dropped_rows: tuple[int, ...]
    messages: tuple[str, ...]

    @property
    def n_dropped(self) -> int:
        return len(self.dropped_rows)


MISSING_MARKERS = ("", "NA", "NAN", ".")


def _is_missing(text: str) -> bool:
    return text.strip().upper() in MISSING_MARKERS


def _parse_cell(text: str) -> Optional[float]:
    text = text.strip()
    if _is_missing(text):
        return None
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def ingest_csv(path, formula: Formula, strict: bool = False) -> Ingested:
    """Read a header-first UTF-8 CSV into a :class:`Dataset`.

    Rows with a missing or non-numeric referenced cell are dropped and counted
    (listwise deletion). With ``strict=True`` a non-numeric cell is an error
    naming its data row (1-based, header excluded); empty cells and the
    markers ``NA``, ``NaN`` and ``.`` still count as missing and are dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        missing = [c for c in formula.referenced if c not in header]
        if missing:
            raise DataError(f"column(s) not in header: {', '.join(missing)}")
        if len(set(header)) != len(header):
            raise DataError("duplicate column names in header")
        index = [header.index(c) for c in formula.referenced]
        rows, dropped, messages = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            cells = [row[i] if i < len(row) else "" for i in index]
            values = [_parse_cell(c) for c in cells]
            bad = [(name, c) for name, c, v in zip(formula.referenced, cells, values) if v is None]
            if bad:
                non_numeric = [(name, c) for name, c in bad if not _is_missing(c)]
                if strict and non_numeric:
                    name, c = non_numeric[0]
                    raise DataError(f"row {row_no}: non-numeric value {c.strip()!r} in column {name!r}")
                dropped.append(row_no)
                messages.append(f"row {row_no} dropped: unusable value in " + ", ".join(n for n, _ in bad))
                continue
            rows.append(values)
    if not rows:
        raise DataError("no usable rows after dropping incomplete records")
    table = np.array(rows, dtype=float)
    k = 0
    if formula.average:
        y = table[:, :len(formula.average)].mean(axis=1)
        k = len(formula.average)
    elif formula.outcome is not None:
        y = table[:, 0]
        k = 1
    if formula.is_survival:
        time, event = table[:, k], table[:, k + 1]
        k += 2
    covs = table[:, k:]
    n = table.shape[0]
    X = np.column_stack([np.ones(n), covs]) if formula.intercept else covs
    if formula.is_survival:
        if np.any((event != 0) & (event != 1)):
            raise DataError(f"event column {formula.event!r} must be coded 0/1")
        data = Dataset.survival(time, event, X)
    else:
        data = Dataset(y, X)
    return Ingested(data, formula.term_names, tuple(dropped), tuple(messages))


def bundled_dataset(name: str = "synthetic_sbp.csv") -> Path:
    """Path of a CSV shipped inside the package."""
    path = Path(str(resources.files(__package__).joinpath("data", name)))
    if not path.is_file():
        raise DataError(f"no bundled dataset named {name!r}")
    return path


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary sibling file, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys
    become underscores, and later keys override earlier ones."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {line_no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise DataError(f"config line {line_no}: empty key")
        out[key.replace("-", "_")] = value
    return out


def read_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such config file: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


# --- tables -----------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "NA" if not np.isfinite(value) else f"{float(value):.3f}"
    return str(value)


def _json_value(value):
    if isinstance(value, np.ndarray):
        return [_json_value(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_json_value(v) for v in value]
    if isinstance(value, dict):
        return {k: _json_value(v) for k, v in value.items()}
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def to_markdown(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Aligned pipe table; text columns left-aligned, numbers right-aligned."""
    body = [[_fmt(v) for v in row] for row in rows]
    raw_rows = [list(r) for r in body]
    widths = [max([len(h)] + [len(r[j]) for r in raw_rows]) for j, h in enumerate(header)]
    numeric = [all(_is_number(r[j]) for r in raw_rows) and raw_rows != [] for j in range(len(header))]

    def line(cells):
        parts = [c.rjust(w) if num else c.ljust(w) for c, w, num in zip(cells, widths, numeric)]
        return "| " + " | ".join(parts) + " |"

    rule = "|" + "|".join(("-" * (w + 1) + ":") if num else ("-" * (w + 2)) for w, num in zip(widths, numeric)) + "|"
    return "\n".join([line(header), rule] + [line(r) for r in raw_rows]) + "\n"


def _is_number(text: str) -> bool:
    if text in ("", "NA"):
        return True
    try:
        float(text)
    except ValueError:
        return False
    return True


def render_table(header: Sequence[str], rows: Sequence[Sequence], fmt: str) -> str:
    """A plain table in any of :data:`FORMATS`; JSON is a list of records."""
    if fmt == "csv":
        return to_csv(header, rows)
    if fmt == "markdown":
        return to_markdown(header, rows)
    if fmt == "json":
        return json.dumps([_json_value(dict(zip(header, row))) for row in rows], indent=2) + "\n"
    raise DataError(f"unknown format {fmt!r}; choose from {FORMATS}")


# --- fit report ---------------------------------------------------------------

@dataclass(frozen=True)
class FitReport:
    """Frequentist and Bayesian estimates side by side, one row per term."""

    family: Family
    terms: tuple[str, ...]
    n: int
    n_dropped: int
    estimate: np.ndarray
    model_se: np.ndarray
    robust_se: np.ndarray
    bayes_estimate: np.ndarray
    post_sd: np.ndarray
    brse: np.ndarray
    level: float
    credible: np.ndarray
    robust_interval: np.ndarray
    diagnostics: dict
    settings: dict

    def rows(self) -> list[list]:
        return [
            [t, self.estimate[j], self.model_se[j], self.robust_se[j],
             self.bayes_estimate[j], self.post_sd[j], self.brse[j]]
            for j, t in enumerate(self.terms)
        ]


def _footer_lines(report: FitReport) -> list[str]:
    d = report.diagnostics
    lines = [
        f"model: {report.family.value}; n = {report.n}; rows dropped = {report.n_dropped}",
        "mcmc: " + ", ".join(f"{k} = {v}" for k, v in report.settings.items()),
        "split R-hat: " + ", ".join(f"{t} {r:.3f}" for t, r in zip(report.terms, d["rhat"])),
        "ESS: " + ", ".join(f"{t} {e:.0f}" for t, e in zip(report.terms, d["ess"])),
    ]
    if d.get("rhat_sigma2") is not None:
        lines.append(f"sigma2: R-hat {d['rhat_sigma2']:.3f}, ESS {d['ess_sigma2']:.0f}")
    if d.get("acceptance_rate") is not None:
        lines.append("acceptance rate: " + ", ".join(f"{a:.3f}" for a in np.atleast_1d(d["acceptance_rate"])))
    for w in d.get("warnings", ()):
        lines.append(f"warning: {w}")
    return lines


def render_fit_report(report: FitReport, fmt: str) -> str:
    header = ("term",) + FIT_COLUMNS
    if fmt == "csv":
        return to_csv(header, report.rows()) + "".join(f"# {line}\n" for line in _footer_lines(report))
    if fmt == "markdown":
        return to_markdown(header, report.rows()) + "\n" + "".join(f"{line}  \n" for line in _footer_lines(report))
    if fmt == "json":
        payload = {
            "model": report.family.value,
            "n": report.n,
            "rows_dropped": report.n_dropped,
            "level": report.level,
            "terms": [
                {
                    "term": t,
                    "estimate": report.estimate[j],
                    "se": report.model_se[j],
                    "robust_se": report.robust_se[j],
                    "bayes_estimate": report.bayes_estimate[j],
                    "post_sd": report.post_sd[j],
                    "brse": report.brse[j],
                    "credible_interval": report.credible[j],
                    "robust_interval": report.robust_interval[j],
                }
                for j, t in enumerate(report.terms)
            ],
            "mcmc": report.settings,
            "diagnostics": report.diagnostics,
        }
        return json.dumps(_json_value(payload), indent=2) + "\n"
    raise DataError(f"unknown format {fmt!r}; choose from {FORMATS}")


# --- simulation reports -------------------------------------------------------

SIM_COLUMNS = (
    "scenario", "kind", "n", "a", "kappa", "beta", "n_reps", "failed", "events",
    "ave_d_hat", "se_d_hat", "ave_post_sd", "ave_brse", "ave_mle", "ave_robust_se",
    "cover_credible", "cover_freq_robust", "cover_bayes_robust", "kl_point",
)

REPLICATE_COLUMNS = (
    "scenario", "index", "d_hat", "post_sd", "brse", "mle", "model_se", "robust_se",
    "covered_credible", "covered_freq_robust", "covered_bayes_robust", "n_events", "error",
)


def _sim_row(r) -> list:
    dgp = r.dgp
    weibull = dgp.kind == "weibull_ph"
    return [
        r.scenario, dgp.kind, dgp.n,
        None if weibull else dgp.a,
        dgp.kappa if weibull else None,
        dgp.beta[1] if weibull else None,
        r.n_reps, r.n_failed_reps, r.ave_events,
        r.ave_d_hat, r.se_d_hat, r.ave_post_sd, r.ave_brse, r.ave_mle, r.ave_robust_se,
        r.coverage_credible, r.coverage_freq_robust, r.coverage_bayes_robust, r.kl_point,
    ]


def render_sim_reports(reports, fmt: str) -> str:
    return render_table(SIM_COLUMNS, [_sim_row(r) for r in reports], fmt)


def render_replicates(reports) -> str:
    """Per-replicate rows (CSV, full precision) for plotting coverage curves."""
    buf = StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPLICATE_COLUMNS)
    for rep in reports:
        for r in rep.replicates or ():
            writer.writerow([
                rep.scenario, r.index, repr(r.d_hat), repr(r.post_sd), repr(r.brse), repr(r.mle),
                repr(r.model_se), repr(r.robust_se), int(r.covered_credible),
                int(r.covered_freq_robust), int(r.covered_bayes_robust), repr(r.n_events),
                r.error or "",
            ])
    return buf.getvalue()
