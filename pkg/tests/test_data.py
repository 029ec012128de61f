import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from natmed.data import (
    Category,
    CsvParseError,
    Dataset,
    InestimableError,
    Observation,
    Schema,
    ValidationError,
    category_code,
    load_csv,
    validate_case_cohort,
    write_csv,
)
from natmed.simulate import Dgp1Spec, Dgp2Spec, gen_dgp1, gen_dgp2

from conftest import datasets


def _write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_load_four_rows(tmp_path):
    p = _write(tmp_path, "W1,A,R,S,C,Y\n0,1,1,0.2,1,0\n1,0,1,1.1,1,1\n1,1,0,,1,0\n0,0,1,0.0,0,0\n")
    d = load_csv(p)
    assert d.n == 4
    assert_array_equal(d.r, [1, 1, 0, 1])
    assert np.isnan(d.s[2])
    assert_array_equal(d.cy, [0, 1, 0, 0])


def test_outcome_under_censoring_rejected(tmp_path):
    p = _write(tmp_path, "W1,A,R,S,C,Y\n0,1,1,0.2,1,0\n0,1,1,0.2,0,1\n")
    with pytest.raises(ValidationError, match="outcome recorded under censoring") as exc:
        load_csv(p)
    assert exc.value.row == 1


@pytest.mark.parametrize("body, cls, row", [
    ("0,1,1,0.2,1,0\n0,1,x,0.2,1,0\n", CsvParseError, 1),
    ("0,1,1,0.2,1\n", CsvParseError, 0),
    ("0,1,0,0.5,1,0\n", ValidationError, 0),
    ("0,1,1,0.5,1,0\n0,1,1,,1,0\n", ValidationError, 1),
    ("0,2,1,0.5,1,0\n", CsvParseError, 0),
])
def test_csv_errors_name_the_row(tmp_path, body, cls, row):
    p = _write(tmp_path, "W1,A,R,S,C,Y\n" + body)
    with pytest.raises(cls) as exc:
        load_csv(p)
    assert exc.value.row == row


def test_missing_column(tmp_path):
    p = _write(tmp_path, "W1,A,R,S,C\n0,1,1,0.2,1\n")
    with pytest.raises(CsvParseError, match="header lacks"):
        load_csv(p, Schema(w=("W1",)))


def test_custom_schema(tmp_path):
    p = _write(tmp_path, "age,arm,ph2,marker,obs,event\n1,1,1,2.5,1,1\n0,0,0,,1,0\n")
    sch = Schema.from_mapping({"w": "age", "a": "arm", "r": "ph2", "s": "marker", "c": "obs", "y": "event"})
    d = load_csv(p, sch)
    assert d.covariate_names == ("age",)
    assert_array_equal(d.cy, [1, 0])


@given(datasets())
def test_csv_round_trip(tmp_path_factory, d):
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(d, p)
    assert load_csv(p).equals(d)


@given(datasets())
def test_invariants_hold_for_valid_data(d):
    assert np.all(d.cy[d.c == 0] == 0)
    assert_array_equal(np.isnan(d.s), d.r == 0)
    for col in (d.a, d.r, d.c, d.cy):
        assert set(np.unique(col)) <= {0, 1}


@given(datasets(), st.integers(0, 39))
def test_mediator_on_unsampled_row_rejected(d, i):
    i = i % d.n
    s = d.s.copy()
    r = d.r.copy()
    r[i] = 0
    s[i] = 1.0
    with pytest.raises(ValidationError):
        Dataset(d.w, d.a, r, s, d.c, d.cy)


def test_ragged_rows_rejected():
    rows = [Observation((0.0,), 1, 1, 0.5, 1, 0), Observation((0.0, 1.0), 0, 1, 0.5, 1, 0)]
    with pytest.raises(ValidationError, match="same covariate dimension"):
        Dataset.from_rows(rows)


def test_rows_round_trip():
    rows = [Observation((0.0, 1.0), 1, 1, 0.5, 1, 1), Observation((1.0, 1.0), 0, 0, None, 0, 0)]
    d = Dataset.from_rows(rows)
    assert d.rows == tuple(rows)


def test_dataset_is_read_only():
    d = Dataset([[0.0]], [1], [1], [0.5], [1], [0])
    with pytest.raises(ValueError):
        d.a[0] = 0


def test_category_code():
    assert category_code(1, 1) is Category.CASE
    assert category_code(0, 0) is Category.CENSORED
    assert category_code(1, 0) is Category.SURVIVOR
    with pytest.raises(ValidationError):
        category_code(0, 1)


@given(st.sampled_from([(0, 0), (1, 0), (1, 1)]))
def test_category_dummies_are_a_bijection(pair):
    from natmed.data import category_dummies

    dummy = tuple(category_dummies([pair[0]], [pair[1]])[0])
    others = {tuple(category_dummies([c], [y])[0]) for c, y in [(0, 0), (1, 0), (1, 1)] if (c, y) != pair}
    assert dummy not in others


def test_case_cohort_one_case_unsampled():
    d = Dataset([[0.0], [1.0]], [1, 0], [0, 1], [np.nan, 0.3], [1, 1], [1, 0])
    assert not validate_case_cohort(d).all_cases_sampled


def test_dgp1_sample_counts():
    d = gen_dgp1(Dgp1Spec(2000, seed=3))
    check = validate_case_cohort(d)
    assert check.all_cases_sampled
    # expected phase-two count: cases plus a quarter of the non-cases
    cases = int(d.cy.sum())
    expected = cases + 0.25 * (d.n - cases)
    sd = np.sqrt(0.25 * 0.75 * (d.n - cases))
    assert abs(d.r.sum() - expected) < 4 * sd


def test_dgp2_sixteen_strata():
    d = gen_dgp2(Dgp2Spec(n=30000, alpha=-3.1, seed=1))
    check = validate_case_cohort(d)
    assert len(check.per_stratum_counts) == 16
    assert check.all_cases_sampled


def test_check_estimable():
    d = Dataset([[0.0], [1.0]], [1, 1], [1, 1], [0.1, 0.3], [1, 1], [1, 0])
    with pytest.raises(InestimableError, match="A=0"):
        d.check_estimable()
