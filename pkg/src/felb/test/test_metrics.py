import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from felb.errors import ShapeError
from felb.federation import round_factors
from felb.matrix import BinaryMatrix
from felb.metrics import (
    HISTORY_COLUMNS,
    RoundLog,
    f1,
    f1_star,
    hamming,
    integrality_gap,
    rmsd,
    rounds_to_frame,
    summarize,
    write_rounds_csv,
)

binary_4x5 = arrays(np.int8, (4, 5), elements=st.integers(0, 1))


def M(rows):
    return BinaryMatrix.from_dense(rows)


def test_rmsd_examples():
    A = M([[1, 0], [0, 1]])
    assert rmsd(A, A) == 0.0
    assert rmsd(A, BinaryMatrix.zeros(2, 2)) == pytest.approx(math.sqrt(0.5))
    assert rmsd(A, A.complement()) == 1.0


def test_f1_examples():
    A = M([[1, 1, 0, 0]])
    assert f1(A, A) == 1.0
    assert f1(A, BinaryMatrix.zeros(1, 4)) == 0.0
    assert f1(A, M([[1, 0, 1, 0]])) == pytest.approx(0.5)
    assert f1(BinaryMatrix.zeros(2, 2), BinaryMatrix.zeros(2, 2)) == 1.0


def test_f1_star_examples():
    mask = M([[1, 1, 0], [1, 1, 0]])
    assert f1_star(mask, mask) == 1.0
    assert f1_star(mask, mask.complement()) == 0.0
    assert f1_star(mask, M([[1, 0, 0], [1, 0, 0]])) == pytest.approx(2 / 3)


def test_metric_shape_mismatch():
    with pytest.raises(ShapeError):
        rmsd(BinaryMatrix.zeros(2, 2), BinaryMatrix.zeros(2, 3))
    with pytest.raises(ShapeError):
        f1(BinaryMatrix.zeros(2, 2), BinaryMatrix.zeros(3, 2))


def test_integrality_gap_examples():
    assert integrality_gap(np.array([[0.0, 1.0]])) == 0.0
    assert integrality_gap(np.full((3, 3), 0.5)) == 0.5
    assert integrality_gap(np.array([[0.25, 0.75]])) == pytest.approx(0.25)


@given(binary_4x5, binary_4x5)
def test_f1_is_symmetric_and_rmsd_matches_hamming(a, b):
    A, B = M(a), M(b)
    assert f1(A, B) == pytest.approx(f1(B, A))
    assert rmsd(A, B) ** 2 == pytest.approx(hamming(A, B) / 20)
    assert 0.0 <= f1(A, B) <= 1.0


@given(binary_4x5, binary_4x5, binary_4x5)
def test_rmsd_triangle_inequality(a, b, c):
    A, B, C = M(a), M(b), M(c)
    assert rmsd(A, C) <= rmsd(A, B) + rmsd(B, C) + 1e-12


@given(arrays(np.float64, (3, 4), elements=st.floats(-2, 3)))
def test_rounding_closes_integrality_gap(X):
    U, _ = round_factors(X, np.zeros((4, 1)))
    assert integrality_gap(U.to_dense()) == 0.0


def _logs():
    return [
        RoundLog(1, 10.0, 0.5, 0.25, None, 0.3, 0.01),
        RoundLog(2, 4.123456789123, 0.25, 0.5, 0.75, 0.1, 0.02, global_objective=9.0),
    ]


def test_frame_has_fixed_header_and_hides_timing():
    frame = rounds_to_frame(_logs())
    assert list(frame.columns) == HISTORY_COLUMNS
    assert frame["elapsed_seconds"].isna().all()
    assert pd.isna(frame.loc[0, "f1_star"])
    assert rounds_to_frame(_logs(), record_timing=True)["elapsed_seconds"].tolist() == [0.01, 0.02]


def test_history_csv_format(tmp_path):
    path = tmp_path / "history.csv"
    write_rounds_csv(_logs(), path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS)
    assert lines[1] == "1,10,0.5,0.25,,0.3,"
    assert lines[2].startswith("2,4.12345679,")


def test_empty_history_writes_header_only(tmp_path):
    path = tmp_path / "history.csv"
    write_rounds_csv([], path)
    assert path.read_text().splitlines() == [",".join(HISTORY_COLUMNS)]


def test_summarize():
    assert summarize([]) == {"rounds": 0}
    summary = summarize(_logs())
    assert summary["rounds"] == 2 and summary["f1_star"] == 0.75
    assert summary["elapsed_seconds_total"] == 0.02
