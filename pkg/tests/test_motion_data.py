import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionid.errors import ParseError, UnsupportedRateError, ValidationError
from motionid.motion_data import (COLUMNS, NUM_FEATURES, RawFrame, RawSequence, load_column_mapping,
                                  parse_recording, resample, serialize_recording, validate_sequence)

IDENTITY_ROW = [0.0, 0, 0, 0, 0, 0, 0, 1] + [0, 0, 0, 0, 0, 0, 1] * 2


def _csv(rows, header=COLUMNS):
    return ",".join(header) + "\n" + "".join(",".join(repr(float(v)) for v in r) + "\n" for r in rows)


def _random_sequence(n, seed=0, fps=90.0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, NUM_FEATURES))
    for o in (3, 10, 17):
        feats[:, o:o + 4] /= np.linalg.norm(feats[:, o:o + 4], axis=1, keepdims=True)
    return RawSequence("u", "s", fps, np.arange(n) / fps, feats)


def test_single_identity_row():
    seq = parse_recording(_csv([IDENTITY_ROW]), "a", "1")
    assert len(seq) == 1 and seq.fps == 90.0
    frame = seq.frame(0)
    for pose in (frame.hmd, frame.controller_left, frame.controller_right):
        assert pose.position == (0.0, 0.0, 0.0)
        assert pose.orientation == (0.0, 0.0, 0.0, 1.0)


def test_missing_columns_names_line():
    rows = [list(IDENTITY_ROW) for _ in range(10)]
    for i, r in enumerate(rows):
        r[0] = i / 90
    text = _csv(rows).splitlines()
    # line 7 of the file is data row 6 (header is line 1)
    text[6] = ",".join(text[6].split(",")[:-3])
    with pytest.raises(ParseError, match="line 7") as err:
        parse_recording("\n".join(text) + "\n", "a", "1")
    assert err.value.line == 7


def test_non_numeric_value_names_line():
    text = _csv([IDENTITY_ROW, IDENTITY_ROW]).replace("\n0.0,", "\nabc,", 1)
    with pytest.raises(ParseError, match="line 2"):
        parse_recording(text, "a", "1")


def test_row_count_preserved_against_line_count():
    seq = _random_sequence(5400, seed=3)
    text = serialize_recording(seq)
    data_lines = sum(1 for line in io.StringIO(text)) - 1
    parsed = parse_recording(text, "u", "s")
    assert len(parsed) == data_lines == 5400
    assert parsed.fps == 90


def test_timestamp_regression_rejected():
    rows = [list(IDENTITY_ROW) for _ in range(3)]
    for r, t in zip(rows, (0.0, 0.011, 0.010)):
        r[0] = t
    with pytest.raises(ValidationError, match="line 4"):
        parse_recording(_csv(rows), "a", "1")


def test_zero_norm_quaternion_rejected():
    rows = [list(IDENTITY_ROW) for _ in range(3)]
    rows[1][0] = 0.1
    rows[2][0] = 0.2
    rows[2][14:18] = [0, 0, 0, 0]
    with pytest.raises(ValidationError, match="line 4"):
        parse_recording(_csv(rows), "a", "1")


def test_quaternions_renormalized_on_ingest():
    row = list(IDENTITY_ROW)
    row[4:8] = [0.0, 0.0, 0.0, 1.0005]
    seq = parse_recording(_csv([row]), "a", "1")
    assert np.linalg.norm(seq.features[0, 3:7]) == pytest.approx(1.0, abs=1e-12)
    assert validate_sequence(seq).findings == []


def test_large_norm_deviation_reported():
    row = list(IDENTITY_ROW)
    row[4:8] = [0.0, 0.0, 0.0, 1.01]
    report = validate_sequence(parse_recording(_csv([row]), "a", "1"))
    assert [f.kind for f in report.findings] == ["quaternion_norm"]


def test_column_mapping(tmp_path):
    source = [f"src_{c}" for c in COLUMNS]
    mapping_file = tmp_path / "map.txt"
    mapping_file.write_text("\n".join(f"{c}=src_{c}" for c in COLUMNS) + "\n")
    # shuffled source order must still land in canonical order
    order = list(reversed(range(len(COLUMNS))))
    row = np.arange(len(COLUMNS), dtype=float)
    row[4:8] = [0, 0, 0, 1]
    row[11:15] = [0, 0, 0, 1]
    row[18:22] = [0, 0, 0, 1]
    text = _csv([row[order]], header=[source[i] for i in order])
    seq = parse_recording(text, "a", "1", column_map=load_column_mapping(mapping_file))
    np.testing.assert_array_equal(seq.features[0], row[1:])


def test_unknown_mapped_column_is_parse_error():
    with pytest.raises(ParseError, match="not found"):
        parse_recording("a,b,c\n1,2,3\n", "a", "1", column_map={"timestamp": "zzz"})


@pytest.mark.parametrize("n, expected", [(540, 90), (1, 1), (901, 151)])
def test_resample_lengths(n, expected):
    seq = _random_sequence(n)
    out = resample(seq, 15)
    assert len(out) == expected and out.fps == 15
    assert len(out) == math.ceil(n / 6)


def test_resample_901_keeps_every_sixth_frame():
    seq = _random_sequence(901)
    out = resample(seq, 15)
    picked = [i for i in range(901) if i % 6 == 0]
    assert picked[-1] == 900
    np.testing.assert_array_equal(out.features, seq.features[picked])


@pytest.mark.parametrize("target", [120, 7, 0])
def test_resample_unsupported_rate(target):
    with pytest.raises(UnsupportedRateError):
        resample(_random_sequence(10), target)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 200), k=st.sampled_from([1, 2, 3, 6, 9]))
def test_resample_idempotent_and_never_fabricates(n, k):
    seq = _random_sequence(n, seed=n)
    once = resample(seq, 90 / k)
    assert resample(once, 90 / k) == once
    source = {row.tobytes() for row in seq.features}
    assert all(row.tobytes() in source for row in once.features)


def test_validate_clean_sequence_is_empty():
    assert not validate_sequence(_random_sequence(100))


def test_validate_reports_nan_at_frame():
    seq = _random_sequence(20)
    feats = seq.features.copy()
    feats[7, 8] = np.nan
    report = validate_sequence(RawSequence("u", "s", 90, seq.timestamps, feats))
    assert [(f.kind, f.frame) for f in report.findings] == [("non_finite", 7)]
    assert "left_pos_y" in report.findings[0].detail


def test_validate_reports_regression_and_gap():
    feats = _random_sequence(3).features
    report = validate_sequence(RawSequence("u", "s", 90, [0.0, 0.011, 0.010], feats))
    assert [f.kind for f in report.findings] == ["timestamp_regression"]
    report = validate_sequence(RawSequence("u", "s", 90, [0.0, 0.011, 0.2], feats))
    assert [(f.kind, f.frame) for f in report.findings] == [("gap", 2)]


def test_serialize_parse_roundtrip_at_binary32_precision():
    seq = _random_sequence(200, seed=5)
    back = parse_recording(serialize_recording(seq), "u", "s")
    np.testing.assert_allclose(back.features, seq.features, rtol=2e-7, atol=1e-8)
    np.testing.assert_allclose(back.timestamps, seq.timestamps, rtol=2e-7, atol=1e-12)


def test_sequence_is_immutable_and_iterable():
    seq = _random_sequence(4)
    with pytest.raises(ValueError):
        seq.features[0, 0] = 1.0
    frames = list(seq)
    assert all(isinstance(f, RawFrame) for f in frames)
    assert RawSequence.from_frames(frames, "u", "s") == seq
