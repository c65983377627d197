"""Survey parsing and contact-age resolution."""

import io

import numpy as np
import pytest

from contactnet.common import N_AGE, age_to_group, groups_intersecting, spawn_rng
from contactnet.survey import (
    ColumnMap,
    EgoRecord,
    RawContact,
    SurveyFormatError,
    build_ego_vectors,
    build_mixing_prior,
    parse_survey,
    resolve_contact_age,
)


def _parse(parts: str, conts: str, **kwargs):
    return parse_survey(io.StringIO(parts), io.StringIO(conts), **kwargs)

PART_HEADER = "part_id,part_age\n"
CONT_HEADER = "part_id,cnt_age_exact,cnt_age_est_min,cnt_age_est_max,duration_multi\n"


def test_age_group_boundaries():
    # group edges: {0-4, 5-11, 12-17, 18-29, 30-39, 40-49, 50-59, 60-69, 70+}
    for age, group in [(0, 0), (4, 0), (5, 1), (11, 1), (12, 2), (17, 2),
                       (18, 3), (29, 3), (30, 4), (39, 4), (40, 5), (49, 5),
                       (50, 6), (59, 6), (60, 7), (69, 7), (70, 8), (95, 8), (120, 8)]:
        assert age_to_group(age) == group


def test_groups_intersecting_spans():
    assert groups_intersecting(0, 4) == [0]
    assert groups_intersecting(3, 6) == [0, 1]
    assert groups_intersecting(18, 29) == [3]
    assert groups_intersecting(60, 120) == [7, 8]
    assert groups_intersecting(0, 120) == list(range(N_AGE))


def test_basic_parse_and_counts():
    parts = PART_HEADER + "1,34\n2,8\n"
    conts = CONT_HEADER + "1,25,,,5\n1,,30,45,3\n2,,,,1\n9,50,,,2\n"
    records, report = _parse(parts, conts)
    assert len(records) == 2
    assert report.participants_read == 2
    assert report.contacts_read == 4
    assert report.contacts_dropped_orphan == 1
    by_id = {r.participant_id: r for r in records}
    assert by_id["1"].age_group == 4
    assert len(by_id["1"].contacts) == 2
    assert by_id["1"].contacts[0].duration == 4


def test_missing_duration_goes_to_shortest():
    parts = PART_HEADER + "1,40\n"
    conts = CONT_HEADER + "1,20,,,\n"
    records, report = _parse(parts, conts)
    assert records[0].contacts[0].duration == 0
    assert report.contacts_missing_duration == 1


def test_bad_duration_code_rejected():
    parts = PART_HEADER + "1,40\n"
    conts = CONT_HEADER + "1,20,,,9\n1,21,,,2\n"
    records, report = _parse(parts, conts)
    assert report.contacts_rejected_bad_duration == 1
    assert len(records[0].contacts) == 1


def test_participant_without_age_rejected():
    parts = PART_HEADER + "1,\n2,50\n"
    conts = CONT_HEADER + "1,20,,,1\n2,20,,,1\n"
    records, report = _parse(parts, conts)
    assert len(records) == 1
    assert report.participants_rejected_no_age == 1
    # the orphaned contact of the rejected participant is dropped
    assert report.contacts_dropped_orphan == 1


def test_duplicate_participant_id_raises():
    parts = PART_HEADER + "1,30\n1,40\n"
    with pytest.raises(SurveyFormatError):
        _parse(parts, CONT_HEADER)


def test_reversed_interval_raises():
    parts = PART_HEADER + "1,30\n"
    conts = CONT_HEADER + "1,,40,20,1\n"
    with pytest.raises(SurveyFormatError):
        _parse(parts, conts)


def test_non_numeric_age_raises():
    parts = PART_HEADER + "1,abc\n"
    with pytest.raises(SurveyFormatError):
        _parse(parts, CONT_HEADER)


def test_exact_age_preferred_over_interval():
    parts = PART_HEADER + "1,30\n"
    conts = CONT_HEADER + "1,25,20,60,1\n"
    records, _ = _parse(parts, conts)
    contact = records[0].contacts[0]
    assert contact.age_min == contact.age_max == 25


def test_one_sided_interval_collapses():
    parts = PART_HEADER + "1,30\n"
    conts = CONT_HEADER + "1,,45,,1\n1,,,52,1\n"
    records, _ = _parse(parts, conts)
    assert records[0].contacts[0].age_min == records[0].contacts[0].age_max == 45
    assert records[0].contacts[1].age_min == records[0].contacts[1].age_max == 52


def test_ages_clamped_to_range():
    parts = PART_HEADER + "1,30\n"
    conts = CONT_HEADER + "1,150,,,1\n"
    records, _ = _parse(parts, conts)
    assert records[0].contacts[0].age_max <= 120


def test_column_remapping():
    parts = "pid,yrs\n7,22\n"
    conts = "pid,a,b,c,dur\n7,30,,,2\n"
    cols = ColumnMap(
        participant_id="pid", participant_age="yrs", contact_participant_id="pid",
        contact_age_exact="a", contact_age_min="b", contact_age_max="c",
        contact_duration="dur",
    )
    records, _ = _parse(parts, conts, columns=cols)
    assert records[0].contacts[0].age_min == 30


# -- mixing prior -----------------------------------------------------------


def _record(age_years, contacts):
    return EgoRecord("x", age_years, age_to_group(age_years), contacts)


def test_prior_uses_only_unambiguous_contacts():
    # Ego 35 (group 4): one exact contact in group 2, one spanning ambiguous.
    records = [
        _record(35, [RawContact(14, 14, 0), RawContact(10, 40, 0)]),
    ]
    prior = build_mixing_prior(records)
    assert prior[4, 2] > 0
    # the ambiguous contact contributed nothing anywhere
    assert prior[4].sum() == pytest.approx(prior[4, 2])


def test_prior_narrow_single_bucket_interval_counts():
    # [30, 39] sits inside group 4 and spans < 15 years: unambiguous.
    records = [_record(20, [RawContact(30, 39, 0)])]
    prior = build_mixing_prior(records)
    assert prior[3, 4] > 0


def test_prior_pooled_fallback_for_empty_rows():
    records = [
        _record(35, [RawContact(14, 14, 0)]),
        _record(36, [RawContact(70, 80, 0)]),
    ]
    report_prior = build_mixing_prior(records)
    # rows without their own observations fall back to the pooled profile
    for a in range(N_AGE):
        assert report_prior[a].sum() > 0


def test_resolution_deterministic_single_bucket():
    prior = np.ones((N_AGE, N_AGE))
    rng = spawn_rng(0, 123)
    # interval [18, 29] cannot leave group 3, so resolution is deterministic
    contact = RawContact(18, 29, 0)
    groups = {resolve_contact_age(contact, prior, 5, rng) for _ in range(40)}
    assert groups == {3}


def test_resolution_wide_interval_follows_prior():
    prior = np.zeros((N_AGE, N_AGE))
    prior[4, 0] = 1.0  # egos in their thirties only ever meet tiny children
    rng = spawn_rng(0, 77)
    contact = RawContact(0, 120, 0)
    for _ in range(20):
        assert resolve_contact_age(contact, prior, 4, rng) == 0


def test_resolution_missing_age_uses_prior_over_all_groups():
    prior = np.zeros((N_AGE, N_AGE))
    prior[4, 8] = 1.0
    rng = spawn_rng(0, 78)
    contact = RawContact(None, None, 0)
    for _ in range(10):
        assert resolve_contact_age(contact, prior, 4, rng) == 8


def test_resolution_zero_prior_falls_back_uniform():
    prior = np.zeros((N_AGE, N_AGE))
    rng = spawn_rng(0, 79)
    contact = RawContact(None, None, 0)
    groups = {resolve_contact_age(contact, prior, 4, rng) for _ in range(200)}
    assert len(groups) >= 5  # spreads across groups instead of crashing


def test_build_ego_vectors_deterministic():
    parts = PART_HEADER + "1,34\n2,8\n3,71\n"
    conts = CONT_HEADER + "1,25,,,5\n1,,0,100,3\n2,,30,45,2\n3,,,,1\n3,12,,,4\n"
    conts += "".join(f"1,,0,100,{1 + i % 5}\n" for i in range(12))
    records, report = _parse(parts, conts)
    prior = np.full((N_AGE, N_AGE), 1.0 / N_AGE)
    v1 = build_ego_vectors(records, prior, seed=42)
    v2 = build_ego_vectors(records, prior, seed=42)
    for a, b in zip(v1, v2):
        assert np.array_equal(a.counts, b.counts)
    v3 = build_ego_vectors(records, prior, seed=43)
    assert any(not np.array_equal(a.counts, b.counts) for a, b in zip(v1, v3))


def test_ego_vector_shape_and_totals():
    parts = PART_HEADER + "1,34\n"
    conts = CONT_HEADER + "1,25,,,5\n1,30,,,1\n1,2,,,3\n"
    records, _ = _parse(parts, conts)
    prior = build_mixing_prior(records)
    vec = build_ego_vectors(records, prior, seed=0)[0]
    assert vec.counts.shape == (45,)
    assert vec.total() == 3
    assert vec.by_age().sum() == 3
    assert vec.owner_age == 4
    # exact contact 25 -> group 3, duration code 5 -> category 4 -> cell 19
    assert vec.counts[3 * 5 + 4] == 1


def test_report_roundtrips_to_json(surveys):
    _, report = surveys["reopen"]
    text = report.to_json()
    assert "contacts_read" in text
    assert report.contacts_read > 0
