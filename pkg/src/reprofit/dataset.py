"""Bioassay tables and the individual-day covariate.

Two CSV inputs are read:

* ``survival.csv`` with header ``replicate,concentration,time,n_alive``
* ``reproduction.csv`` with header ``replicate,concentration,n_offspring``

Each replicate's survival counts are reduced to a number of individual-days
(NID): an animal found dead at ``t[i+1]`` while alive at ``t[i]`` is counted
as alive until the midpoint of that interval, and survivors count for the
whole test duration.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "DataError",
    "SurvivalSeries",
    "ReproductionRecord",
    "ReplicateDatum",
    "BioassayDataset",
    "parse_survival_table",
    "parse_reproduction_table",
    "write_survival_table",
    "write_reproduction_table",
    "compute_nid",
    "assemble_dataset",
    "reproduction_rate",
    "load_dataset",
    "dataset_digest",
]

log = logging.getLogger(__name__)

SURVIVAL_HEADER = ("replicate", "concentration", "time", "n_alive")
REPRODUCTION_HEADER = ("replicate", "concentration", "n_offspring")


class DataError(ValueError):
    """Raised on malformed or inconsistent bioassay tables."""


@dataclass(frozen=True)
class SurvivalSeries:
    replicate_id: str
    concentration: float
    times: tuple[float, ...]
    n_alive: tuple[int, ...]

    def __post_init__(self):
        if len(self.times) != len(self.n_alive) or not self.times:
            raise DataError(f"replicate {self.replicate_id!r}: empty or ragged series")
        if self.times[0] != 0:
            raise DataError(f"replicate {self.replicate_id!r}: first observation must be at time 0")
        for t0, t1 in zip(self.times, self.times[1:]):
            if not t1 > t0:
                raise DataError(f"replicate {self.replicate_id!r}: times not strictly increasing")
        for a0, a1 in zip(self.n_alive, self.n_alive[1:]):
            if a1 > a0:
                raise DataError(f"replicate {self.replicate_id!r}: survivors increased ({a0} -> {a1})")
        if self.n_alive[-1] < 0:
            raise DataError(f"replicate {self.replicate_id!r}: negative survivor count")

    @property
    def initial_count(self) -> int:
        return self.n_alive[0]

    @property
    def final_count(self) -> int:
        return self.n_alive[-1]


@dataclass(frozen=True)
class ReproductionRecord:
    replicate_id: str
    concentration: float
    n_offspring: int

    def __post_init__(self):
        if self.n_offspring < 0:
            raise DataError(f"replicate {self.replicate_id!r}: negative offspring count")


@dataclass(frozen=True)
class ReplicateDatum:
    concentration: float
    n_offspring: int
    nid: float
    had_mortality: bool
    replicate_id: str = ""


@dataclass(frozen=True)
class BioassayDataset:
    """Analysis-ready dataset: one entry per replicate.

    The ``concentrations``, ``counts`` and ``nids`` arrays are derived views
    used by the likelihood code.
    """

    replicates: tuple[ReplicateDatum, ...]
    test_duration: float
    concentration_unit: str = ""
    concentrations: np.ndarray = field(init=False, repr=False, compare=False)
    counts: np.ndarray = field(init=False, repr=False, compare=False)
    nids: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        reps = tuple(self.replicates)
        object.__setattr__(self, "replicates", reps)
        for r in reps:
            if not r.nid > 0:
                raise DataError(f"replicate {r.replicate_id!r}: NID must be positive")
        conc = np.array([r.concentration for r in reps], dtype=float)
        counts = np.array([r.n_offspring for r in reps], dtype=float)
        nids = np.array([r.nid for r in reps], dtype=float)
        for a in (conc, counts, nids):
            a.setflags(write=False)
        object.__setattr__(self, "concentrations", conc)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "nids", nids)

    def __len__(self):
        return len(self.replicates)

    def tested_concentrations(self) -> np.ndarray:
        return np.unique(self.concentrations)

    def rescaled(self, k: float) -> "BioassayDataset":
        """Copy with every concentration multiplied by ``k``."""
        reps = tuple(
            ReplicateDatum(r.concentration * k, r.n_offspring, r.nid, r.had_mortality, r.replicate_id)
            for r in self.replicates
        )
        return BioassayDataset(reps, self.test_duration, self.concentration_unit)


def _open_text(path_or_stream) -> tuple[IO[str], bool]:
    if isinstance(path_or_stream, (str, os.PathLike)):
        return open(path_or_stream, newline="", encoding="utf-8"), True
    return path_or_stream, False


def _read_rows(path_or_stream, header: Sequence[str]) -> Iterable[tuple[int, list[str]]]:
    fh, owned = _open_text(path_or_stream)
    try:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError("empty table, header row required") from None
        got = tuple(h.strip() for h in first)
        if got != tuple(header):
            raise DataError(f"line 1: expected header {','.join(header)}, got {','.join(got)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [c.strip() for c in row]
    finally:
        if owned:
            fh.close()


def _number(text: str, line: int, name: str, integer: bool = False):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}: cannot parse {name} {text!r}") from None
    if not np.isfinite(value) or value < 0:
        raise DataError(f"line {line}: {name} must be a finite non-negative number, got {text!r}")
    if integer:
        if value != int(value):
            raise DataError(f"line {line}: {name} must be an integer, got {text!r}")
        return int(value)
    return value


def parse_survival_table(path_or_stream) -> list[SurvivalSeries]:
    """Read a survival table into one series per replicate, sorted by time.

    Replicates keep their order of first appearance.
    """
    obs: dict[str, dict[float, tuple[int, int]]] = {}
    conc: dict[str, tuple[float, int]] = {}
    for line, (rep, c, t, n) in _read_rows(path_or_stream, SURVIVAL_HEADER):
        if not rep:
            raise DataError(f"line {line}: empty replicate id")
        c = _number(c, line, "concentration")
        t = _number(t, line, "time")
        n = _number(n, line, "n_alive", integer=True)
        if rep in conc and conc[rep][0] != c:
            raise DataError(
                f"line {line}: replicate {rep!r} has concentration {c}, "
                f"but {conc[rep][0]} on line {conc[rep][1]}"
            )
        conc.setdefault(rep, (c, line))
        series = obs.setdefault(rep, {})
        if t in series:
            raise DataError(f"line {line}: duplicate (replicate, time) = ({rep!r}, {t}), first on line {series[t][1]}")
        series[t] = (n, line)

    out = []
    for rep, series in obs.items():
        times = sorted(series)
        counts = [series[t][0] for t in times]
        for i in range(1, len(times)):
            if counts[i] > counts[i - 1]:
                raise DataError(
                    f"line {series[times[i]][1]}: survivors increased for replicate {rep!r} "
                    f"({counts[i - 1]} at t={times[i - 1]:g}, {counts[i]} at t={times[i]:g})"
                )
        out.append(SurvivalSeries(rep, conc[rep][0], tuple(times), tuple(counts)))
    return out


def parse_reproduction_table(path_or_stream) -> list[ReproductionRecord]:
    out = []
    seen: dict[str, int] = {}
    for line, (rep, c, n) in _read_rows(path_or_stream, REPRODUCTION_HEADER):
        if not rep:
            raise DataError(f"line {line}: empty replicate id")
        if rep in seen:
            raise DataError(f"line {line}: duplicate replicate {rep!r}, first on line {seen[rep]}")
        seen[rep] = line
        out.append(
            ReproductionRecord(
                rep, _number(c, line, "concentration"), _number(n, line, "n_offspring", integer=True)
            )
        )
    return out


def format_number(x: float) -> str:
    """Shortest round-tripping text for a float; integral values lose '.0'."""
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


def write_survival_table(series: Sequence[SurvivalSeries], stream=None) -> str:
    """Serialize to canonical CSV; returns the text (also written to ``stream``)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SURVIVAL_HEADER)
    for s in series:
        for t, n in zip(s.times, s.n_alive):
            w.writerow([s.replicate_id, format_number(s.concentration), format_number(t), n])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def write_reproduction_table(records: Sequence[ReproductionRecord], stream=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPRODUCTION_HEADER)
    for r in records:
        w.writerow([r.replicate_id, format_number(r.concentration), r.n_offspring])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def compute_nid(series: SurvivalSeries, test_duration: float) -> float:
    """Number of individual-days for one replicate (midpoint rule)."""
    if series.times[-1] != test_duration:
        raise DataError(
            f"replicate {series.replicate_id!r}: last observation at t={series.times[-1]:g}, "
            f"expected test duration {test_duration:g}"
        )
    t = np.asarray(series.times, dtype=float)
    n = np.asarray(series.n_alive, dtype=float)
    deaths = n[:-1] - n[1:]
    midpoints = 0.5 * (t[:-1] + t[1:])
    return float(n[-1] * test_duration + np.dot(deaths, midpoints))


def assemble_dataset(
    survival: Sequence[SurvivalSeries],
    repro: Sequence[ReproductionRecord],
    test_duration: float | None = None,
    concentration_unit: str = "",
) -> BioassayDataset:
    """Join survival and reproduction tables on replicate id.

    ``test_duration`` defaults to the last observation time of the first
    series. Replicates without any individual-days are dropped with a warning.
    """
    by_id = {s.replicate_id: s for s in survival}
    repro_ids = {r.replicate_id for r in repro}
    for r in repro:
        if r.replicate_id not in by_id:
            raise DataError(f"replicate {r.replicate_id!r} has no survival series")
    for rid in by_id:
        if rid not in repro_ids:
            raise DataError(f"replicate {rid!r} has no reproduction record")
    if test_duration is None:
        if not survival:
            raise DataError("no survival series")
        test_duration = survival[0].times[-1]

    data = []
    for r in repro:
        s = by_id[r.replicate_id]
        if s.concentration != r.concentration:
            raise DataError(
                f"replicate {r.replicate_id!r}: concentration {s.concentration:g} in survival table "
                f"but {r.concentration:g} in reproduction table"
            )
        nid = compute_nid(s, test_duration)
        if nid <= 0:
            log.warning("replicate %r has no individual-days and is excluded", r.replicate_id)
            continue
        data.append(
            ReplicateDatum(
                concentration=r.concentration,
                n_offspring=r.n_offspring,
                nid=nid,
                had_mortality=s.final_count < s.initial_count,
                replicate_id=r.replicate_id,
            )
        )
    return BioassayDataset(tuple(data), float(test_duration), concentration_unit)


def reproduction_rate(datum: ReplicateDatum) -> float:
    """Offspring per individual-day."""
    return datum.n_offspring / datum.nid


def load_dataset(survival_path, reproduction_path, test_duration=None) -> BioassayDataset:
    return assemble_dataset(
        parse_survival_table(survival_path), parse_reproduction_table(reproduction_path), test_duration
    )


def dataset_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
