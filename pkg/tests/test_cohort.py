import pytest
from conftest import make_cohort

from rerand.cohort import (
    Cohort,
    CohortError,
    Outcome,
    Schema,
    StratumFactor,
    Subject,
    covariate_fingerprint,
    fnv1a64,
    load_cohort,
    load_schema,
    save_cohort,
    save_schema,
    validate_for_test,
)
from rerand.stats import StatKind


def _write(tmp_path, text, schema):
    data = tmp_path / "c.csv"
    data.write_text(text)
    sp = tmp_path / "s.json"
    save_schema(schema, sp)
    return data, sp


SCHEMA = Schema((StratumFactor("ecog", ("0", "1")), StratumFactor("tmb", ("low", "high"))))


def test_fnv1a64_reference_vectors():
    # published FNV-1a 64 test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


@pytest.mark.parametrize("kind", ["continuous", "binary", "survival"])
def test_csv_round_trip(tmp_path, kind):
    c = make_cohort(30, kind, seed=3)
    save_cohort(c, tmp_path / "c.csv")
    save_schema(c.schema, tmp_path / "s.json")
    back = load_cohort(tmp_path / "c.csv", load_schema(tmp_path / "s.json"))
    assert back.subjects == c.subjects
    assert back.outcome_kind == kind


def test_unknown_level_names_row_and_column(tmp_path):
    data, sp = _write(tmp_path, "id,ecog,tmb,arm,y\na,0,low,control,1.5\nb,2,low,treatment,0.3\n", SCHEMA)
    with pytest.raises(CohortError, match=r"row 2, column 'ecog': unknown level '2'"):
        load_cohort(data, load_schema(sp))


def test_duplicate_id_rejected(tmp_path):
    data, sp = _write(tmp_path, "id,ecog,tmb\na,0,low\na,1,high\n", SCHEMA)
    with pytest.raises(CohortError, match="duplicate subject id"):
        load_cohort(data, load_schema(sp))


def test_missing_response_column_named(tmp_path):
    data, sp = _write(tmp_path, "id,ecog,tmb,arm\na,0,low,control\n", SCHEMA)
    with pytest.raises(CohortError, match="column 'y'"):
        load_cohort(data, load_schema(sp), outcome="continuous")


def test_non_numeric_response(tmp_path):
    data, sp = _write(tmp_path, "id,ecog,tmb,y\na,0,low,abc\n", SCHEMA)
    with pytest.raises(CohortError, match=r"row 1, column 'y': not a number"):
        load_cohort(data, load_schema(sp), outcome="continuous")


def test_outcome_inference(tmp_path):
    data, sp = _write(tmp_path, "id,ecog,tmb,y\na,0,low,1\nb,1,high,0\n", SCHEMA)
    assert load_cohort(data, load_schema(sp)).outcome_kind == "binary"
    data, sp = _write(tmp_path, "id,ecog,tmb,time,event\na,0,low,1.2,1\nb,1,high,3,0\n", SCHEMA)
    assert load_cohort(data, load_schema(sp)).outcome_kind == "survival"


def test_validate_for_test_lists_missing_subjects():
    f = (StratumFactor("g", ("a", "b")),)
    c = Cohort(f, [Subject("x", (0,), Outcome("continuous", 1.0)), Subject("y", (1,))])
    with pytest.raises(CohortError, match="continuous outcome required; missing response for subject\\(s\\): y"):
        validate_for_test(c, StatKind("wald_linear"))
    with pytest.raises(CohortError, match="survival outcome required"):
        validate_for_test(c.with_responses([Outcome("continuous", 1.0)] * 2), StatKind("stratified_logrank"))


def test_fingerprint_ignores_responses_and_arms():
    c = make_cohort(40, "survival", seed=1)
    other = c.with_responses([Outcome("continuous", 0.0)] * c.n_subjects).with_arms([0] * c.n_subjects)
    assert covariate_fingerprint(c) == covariate_fingerprint(other)


def test_fingerprint_detects_covariate_and_schema_changes():
    c = make_cohort(40, "survival", seed=1)
    base = covariate_fingerprint(c)
    s0 = c.subjects[0]
    edited = Cohort(c.factors, (Subject(s0.id, (1 - s0.factor_levels[0],) + s0.factor_levels[1:]),) + c.subjects[1:])
    assert covariate_fingerprint(edited) != base
    reweighted = Cohort((StratumFactor("ecog", ("0", "1"), weight=2.0),) + c.factors[1:], c.subjects)
    assert covariate_fingerprint(reweighted) != base
    relabelled = Cohort(c.factors, c.subjects, ("placebo", "treatment"))
    assert covariate_fingerprint(relabelled) != base


def test_factor_validation():
    with pytest.raises(CohortError):
        StratumFactor("x", ("only",))
    with pytest.raises(CohortError):
        StratumFactor("x", ("a", "b"), weight=-1)
    with pytest.raises(CohortError):
        StratumFactor("x", ("a", "b"), level_probs=(0.3, 0.3))
    with pytest.raises(CohortError):
        Outcome("survival", -1.0, True)


def test_levels_matrix_read_only():
    c = make_cohort(10, None, seed=0)
    m = c.levels_matrix()
    assert m.shape == (10, 2)
    with pytest.raises(ValueError):
        m[0, 0] = 1
