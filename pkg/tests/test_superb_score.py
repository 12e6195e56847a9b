import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from brainrefine.superb_score import (
    HIGHER, LOWER, ResultsFormatError, ResultsTable, TaskResult, fixture_path, load_results_csv,
    per_task_scores, superb_s, task_score,
)

HEADER = "task,metric,direction,base,large,value\n"


def exact_task_score(base, large, u):
    # rational arithmetic oracle; decimal strings are converted exactly
    b, l, v = (Fraction(str(x)) for x in (base, large, u))
    return 1000 * (v - b) / (l - b)


def test_task_score_examples():
    assert task_score(TaskResult("PR", "PER", LOWER, 6.03, 4.75, 5.67)) == pytest.approx(281.25, abs=0.005)
    asv = task_score(TaskResult("ASV", "EER", LOWER, 5.98, 5.65, 5.50))
    assert asv == pytest.approx(1454.55, abs=0.005) and asv > 1000
    assert task_score(TaskResult("KS", "ACC", HIGHER, 96.23, 96.66, 96.23)) == 0.0


def test_fixture_aggregates():
    refined = load_results_csv(fixture_path("refined"))
    assert len(refined.included) == 7 and {r.task for r in refined.excluded} == {"SF"}
    oracle = sum(exact_task_score(r.s_base, r.s_large, r.s_u) for r in refined.included) / 7
    assert superb_s(refined) == pytest.approx(float(oracle), abs=1e-9)
    assert superb_s(refined) == pytest.approx(388.59, abs=0.01)
    assert superb_s(load_results_csv(fixture_path("stimuli_pretrain"))) == pytest.approx(-293.43, abs=0.01)
    assert superb_s(load_results_csv(fixture_path("vanilla_base"))) == 0.0
    assert superb_s(load_results_csv(fixture_path("vanilla_large"))) == 1000.0


def test_exclusion_is_data_driven():
    t = load_results_csv(fixture_path("refined"), excluded_tasks=())
    assert len(t.included) == 9
    with pytest.raises(ValueError):
        superb_s(ResultsTable(t.results, excluded_tasks={r.task for r in t.results}))


def test_per_task_rows():
    rows = per_task_scores(load_results_csv(fixture_path("refined")))
    assert [r["included"] for r in rows].count(False) == 2


def write(tmp_path, body):
    p = tmp_path / "r.csv"
    p.write_text(HEADER + body)
    return p


@pytest.mark.parametrize("body,match", [
    ("PR,PER,lower_better,6.0,6.0,5.0\n", "equal"),
    ("PR,PER,lower_better,6.0,5.0,5.5\nPR,PER,lower_better,6.0,5.0,5.5\n", "duplicate"),
    ("PR,PER,sideways,6.0,5.0,5.5\n", "direction"),
    ("PR,PER,lower_better,6.0,five,5.5\n", "not numeric"),
    ("PR,PER,higher_better,6.0,5.0,5.5\n", "lower_better"),
])
def test_csv_errors(tmp_path, body, match):
    with pytest.raises(ResultsFormatError, match=match):
        load_results_csv(write(tmp_path, body))


def test_csv_bad_header(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ResultsFormatError, match="header"):
        load_results_csv(p)


def test_zero_denominator_names_task():
    r = TaskResult.__new__(TaskResult)
    object.__setattr__(r, "task", "XX")
    for k, v in dict(metric="ACC", direction=HIGHER, s_base=1.0, s_large=1.0, s_u=1.0).items():
        object.__setattr__(r, k, v)
    with pytest.raises(ZeroDivisionError, match="XX"):
        task_score(r)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=1000, deadline=None)
@given(finite, finite, finite, st.floats(0.01, 100) | st.floats(-100, -0.01), finite)
def test_affine_invariance_and_direction_flags(base, large, u, a, b):
    if abs(large - base) < 1e-3:
        large = base + 1.0
    ref = task_score(TaskResult("T", "X", HIGHER, base, large, u))
    moved = task_score(TaskResult("T", "X", HIGHER, a * base + b, a * large + b, a * u + b))
    assert moved == pytest.approx(ref, rel=1e-6, abs=1e-6)
    assert task_score(TaskResult("T", "X", LOWER, base, large, u)) == ref


def test_permutation_invariance():
    t = load_results_csv(fixture_path("refined"))
    rows = list(t.results)
    random.Random(0).shuffle(rows)
    assert superb_s(ResultsTable(rows)) == pytest.approx(superb_s(t), abs=1e-12)


def test_linear_in_task_scores():
    t = load_results_csv(fixture_path("refined"))
    bumped = t.with_values({("PR", "PER"): 5.67 - 0.128})  # PR score +100
    assert superb_s(bumped) - superb_s(t) == pytest.approx(100 / 7, abs=1e-9)
