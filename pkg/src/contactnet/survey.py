"""Survey ingestion: turn two-table contact surveys into 45-cell ego vectors.

Input follows the socialcontactdata two-file syntax: a participants table
(id, age) and a contacts table (participant id, estimated contact age min/max
or exact age, duration category). Rules applied while resolving contact ages:

- Participant age is taken as exact and mapped to its age group.
- A contact age interval that sits inside a single age group and spans fewer
  than 15 years is resolved by uniform sampling over the integer ages in the
  interval; the group is then determined (single-group intervals wider than
  that, only possible for 70+, are equally unambiguous and treated the same).
- Intervals crossing several groups, and contacts with no age at all, draw a
  group proportionally to an age-mixing prior row restricted to the groups the
  interval touches (all groups when age is missing).
- The prior is built in a first pass from the contacts whose group is
  unambiguous; only the ambiguous contacts consult it.
- Missing duration puts the contact in the shortest category (0-5 minutes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import pandas as pd

from .common import (
    N_AGE,
    N_DUR,
    age_to_group,
    cell_index,
    groups_intersecting,
    spawn_rng,
)

NARROW_SPAN_YEARS = 15


class SurveyFormatError(ValueError):
    """A survey row could not be interpreted; carries table name and row index."""

    def __init__(self, table: str, row: int, message: str):
        self.table = table
        self.row = row
        super().__init__(f"{table} row {row}: {message}")


@dataclass(frozen=True)
class RawContact:
    """One reported contact: inclusive age interval (possibly absent) + duration."""

    age_min: Optional[int]
    age_max: Optional[int]
    duration: int  # 0..4, already defaulted for missing values

    def __post_init__(self):
        if (self.age_min is None) != (self.age_max is None):
            raise ValueError("age interval must have both ends or neither")
        if self.age_min is not None and self.age_min > self.age_max:
            raise ValueError(f"age_min {self.age_min} > age_max {self.age_max}")
        if not 0 <= self.duration < N_DUR:
            raise ValueError(f"duration index {self.duration} outside 0..{N_DUR - 1}")


@dataclass
class EgoRecord:
    participant_id: str
    age_years: int
    age_group: int
    contacts: list[RawContact] = field(default_factory=list)


@dataclass
class EgoVector:
    """45-cell contact count vector for one respondent, age-major layout."""

    counts: np.ndarray
    owner_age: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (45,):
            raise ValueError("ego vector must have exactly 45 cells")
        if (self.counts < 0).any():
            raise ValueError("ego vector counts must be nonnegative")

    def by_age(self) -> np.ndarray:
        """Collapse durations: 9-cell age histogram of this ego's contacts."""
        return self.counts.reshape(N_AGE, N_DUR).sum(axis=1)

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class IngestReport:
    """Counts of everything dropped, defaulted, or imputed during ingest."""

    participants_read: int = 0
    participants_rejected_no_age: int = 0
    contacts_read: int = 0
    contacts_dropped_orphan: int = 0
    contacts_rejected_bad_duration: int = 0
    contacts_missing_duration: int = 0
    contacts_resolved_uniform: int = 0
    contacts_resolved_prior: int = 0
    contacts_missing_age: int = 0
    prior_rows_pooled_fallback: list[int] = field(default_factory=list)
    prior_uniform_fallbacks: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class ColumnMap:
    """Column names for the two survey tables (socialcontactdata defaults)."""

    participant_id: str = "part_id"
    participant_age: str = "part_age"
    contact_participant_id: str = "part_id"
    contact_age_exact: str = "cnt_age_exact"
    contact_age_min: str = "cnt_age_est_min"
    contact_age_max: str = "cnt_age_est_max"
    contact_duration: str = "duration_multi"
    # File values for the five duration categories, shortest first.
    duration_codes: tuple = (1, 2, 3, 4, 5)


def _opt_int(value, table: str, row: int, what: str) -> Optional[int]:
    if value is None or (isinstance(value, float) and np.isnan(value)) or value == "":
        return None
    try:
        return int(float(value))
    except (TypeError, ValueError):
        raise SurveyFormatError(table, row, f"unreadable {what}: {value!r}") from None


def parse_survey(
    participants_source,
    contacts_source,
    columns: ColumnMap | None = None,
    delimiter: str = ",",
) -> tuple[list[EgoRecord], IngestReport]:
    """Read the two survey tables into EgoRecords.

    Sources may be paths or open file objects. Contacts referencing unknown
    participants are dropped (counted); participants without a usable age are
    rejected (counted); duration codes outside the configured five are
    rejected (counted); rows that cannot be parsed at all raise
    SurveyFormatError with the table name and row index.
    """
    cols = columns or ColumnMap()
    report = IngestReport()

    parts = pd.read_csv(participants_source, sep=delimiter, dtype=str)
    conts = pd.read_csv(contacts_source, sep=delimiter, dtype=str)
    for name, frame, needed in (
        ("participants", parts, [cols.participant_id, cols.participant_age]),
        ("contacts", conts, [cols.contact_participant_id]),
    ):
        missing = [c for c in needed if c not in frame.columns]
        if missing:
            raise SurveyFormatError(name, 0, f"missing columns {missing}")

    records: dict[str, EgoRecord] = {}
    part_ids = parts[cols.participant_id].to_numpy()
    part_ages = parts[cols.participant_age].to_numpy()
    for i in range(len(parts)):
        report.participants_read += 1
        pid = str(part_ids[i])
        age = _opt_int(part_ages[i], "participants", i, "age")
        if age is None:
            report.participants_rejected_no_age += 1
            continue
        if age < 0:
            raise SurveyFormatError("participants", i, f"negative age {age}")
        if pid in records:
            raise SurveyFormatError("participants", i, f"duplicate participant id {pid!r}")
        records[pid] = EgoRecord(pid, age, age_to_group(age))

    dur_index = {code: k for k, code in enumerate(cols.duration_codes)}

    def column(name):
        return conts[name].to_numpy() if name in conts.columns else None

    c_pid = conts[cols.contact_participant_id].to_numpy()
    c_exact = column(cols.contact_age_exact)
    c_min = column(cols.contact_age_min)
    c_max = column(cols.contact_age_max)
    c_dur = column(cols.contact_duration)

    for i in range(len(conts)):
        report.contacts_read += 1
        rec = records.get(str(c_pid[i]))
        if rec is None:
            report.contacts_dropped_orphan += 1
            continue

        duration = None
        if c_dur is not None:
            code = _opt_int(c_dur[i], "contacts", i, "duration")
            if code is not None:
                if code not in dur_index:
                    report.contacts_rejected_bad_duration += 1
                    continue
                duration = dur_index[code]
        if duration is None:
            report.contacts_missing_duration += 1
            duration = 0

        age_min = age_max = None
        if c_exact is not None:
            exact = _opt_int(c_exact[i], "contacts", i, "exact age")
            if exact is not None:
                age_min = age_max = exact
        if age_min is None and c_min is not None and c_max is not None:
            age_min = _opt_int(c_min[i], "contacts", i, "age min")
            age_max = _opt_int(c_max[i], "contacts", i, "age max")
            if (age_min is None) != (age_max is None):
                age_min = age_max = age_min if age_min is not None else age_max
        if age_min is not None and age_min > age_max:
            raise SurveyFormatError("contacts", i, f"age interval [{age_min}, {age_max}] reversed")
        if age_min is not None:
            age_min = min(120, max(0, age_min))
            age_max = min(120, max(0, age_max))

        rec.contacts.append(RawContact(age_min, age_max, duration))

    return list(records.values()), report


def _unambiguous_group(contact: RawContact) -> Optional[int]:
    """The contact's group when the interval cannot leave one bracket, else None."""
    if contact.age_min is None:
        return None
    groups = groups_intersecting(contact.age_min, contact.age_max)
    return groups[0] if len(groups) == 1 else None


def build_mixing_prior(
    records: list[EgoRecord], report: IngestReport | None = None
) -> np.ndarray:
    """Empirical contact-age distribution per respondent age group.

    Uses only contacts whose age group is unambiguous (first pass). Rows for
    respondent groups with no such contacts fall back to the pooled
    distribution over all respondents; that fallback is flagged in the report.
    """
    mat = np.zeros((N_AGE, N_AGE))
    for rec in records:
        for contact in rec.contacts:
            g = _unambiguous_group(contact)
            if g is not None:
                mat[rec.age_group, g] += 1

    pooled = mat.sum(axis=0)
    if pooled.sum() == 0:
        pooled = np.ones(N_AGE)
    pooled = pooled / pooled.sum()

    prior = np.empty_like(mat)
    for a in range(N_AGE):
        row_total = mat[a].sum()
        if row_total == 0:
            prior[a] = pooled
            if report is not None:
                report.prior_rows_pooled_fallback.append(a)
        else:
            prior[a] = mat[a] / row_total
    return prior


def resolve_contact_age(
    contact: RawContact,
    prior: np.ndarray,
    participant_age: int,
    rng: np.random.Generator,
    report: IngestReport | None = None,
) -> int:
    """Resolve one contact to an age group index. See module docstring for rules."""
    if contact.age_min is None:
        admissible = list(range(N_AGE))
        if report is not None:
            report.contacts_missing_age += 1
    else:
        admissible = groups_intersecting(contact.age_min, contact.age_max)
        if len(admissible) == 1:
            # Single-group interval: uniform integer-age sampling cannot leave
            # the group, so the outcome is deterministic.
            if report is not None:
                report.contacts_resolved_uniform += 1
            return admissible[0]

    weights = prior[participant_age, admissible].astype(float)
    total = weights.sum()
    if total <= 0:
        weights = np.ones(len(admissible))
        total = weights.sum()
        if report is not None:
            report.prior_uniform_fallbacks += 1
    if report is not None:
        report.contacts_resolved_prior += 1
    idx = rng.choice(len(admissible), p=weights / total)
    return admissible[int(idx)]


def build_ego_vectors(
    records: list[EgoRecord],
    prior: np.ndarray | None = None,
    seed: int = 0,
    report: IngestReport | None = None,
) -> list[EgoVector]:
    """Resolve every record into its 45-cell ego vector.

    The prior defaults to the two-pass construction over `records`. Each
    record draws from its own seed-derived stream, so the result is
    reproducible no matter how the loop is scheduled.
    """
    if prior is None:
        prior = build_mixing_prior(records, report)

    vectors = []
    for k, rec in enumerate(records):
        rng = spawn_rng(seed, 1, k)
        counts = np.zeros(45, dtype=np.int64)
        for contact in rec.contacts:
            group = resolve_contact_age(contact, prior, rec.age_group, rng, report)
            counts[cell_index(group, contact.duration)] += 1
        vectors.append(EgoVector(counts, rec.age_group))
    return vectors
