import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dorar import evaluation as E
from dorar.core import build_unit_grid

GRID = build_unit_grid((1, 28, 28), (4, 4))
QUICK = dict(max_epochs=2, patience=1, max_val=30)


def rec(name, a1, a2, n_e=4, s_e="4x4", a1s=0.01, a2s=0.01):
    return E.EvaluationRecord(name, n_e, s_e, a1, a1s, a2, a2s, 5, "mnist", (0, 1, 2, 3, 4))


# values of the 4-chunk MNIST comparison table
DORAR = rec("dorar", 0.8130, 0.8818, a1s=0.0044, a2s=0.0048)
GRAD = rec("grad", 0.1807, 0.9081, a1s=0.0033, a2s=0.0045)
LIME = rec("lime", 0.5858, 0.8978)
REALX = rec("realx", 0.8070, 0.8880)


def test_partial_order_on_published_rows():
    assert E.compare_partial_order(DORAR, GRAD).verdict == "first_better"
    assert E.compare_partial_order(GRAD, DORAR).verdict == "second_better"
    assert E.compare_partial_order(DORAR, REALX).verdict == "first_better"


def test_partial_order_tradeoff_is_incomparable():
    a = rec("a", 0.9, 0.8)
    b = rec("b", 0.8, 0.7)
    assert E.compare_partial_order(a, b).verdict == "incomparable"
    # fewer units with equal accuracies wins
    c = rec("c", 0.8, 0.7, n_e=8)
    assert E.compare_partial_order(b, c).verdict == "first_better"
    assert E.compare_partial_order(b, b).verdict == "equal"
    big = rec("big", 0.8, 0.7, s_e="2x2")
    assert E.compare_partial_order(big, b).verdict == "first_better"


def test_interval_variant_ignores_overlapping_differences():
    a = rec("a", 0.81, 0.88, a1s=0.02, a2s=0.02)
    b = rec("b", 0.80, 0.89, a1s=0.02, a2s=0.02)
    assert E.compare_partial_order(a, b).verdict == "first_better"
    assert E.compare_partial_order(a, b, intervals=True).verdict == "equal"


def test_scalar_bases():
    assert E.compare_scalar(DORAR, GRAD, "ratio").verdict == "first_better"
    assert E.compare_scalar(DORAR, LIME, "weighted", 1.0).verdict == "first_better"
    assert E.scalar_score(DORAR, "weighted", 0.5) == pytest.approx(0.8130 - 0.5 * 0.8818)
    with pytest.raises(ValueError):
        E.compare_scalar(DORAR, rec("x", 0.5, 0.5, n_e=8))
    with pytest.raises(ZeroDivisionError):
        E.scalar_score(rec("z", 0.5, 0.0), "ratio")
    with pytest.raises(ValueError):
        E.scalar_score(DORAR, "median")
    assert E.compare(DORAR, GRAD, "partial-order-intervals").verdict == "first_better"


def test_verdict_matrix_and_format():
    m = E.verdict_matrix([DORAR, GRAD, LIME])
    assert m[0][1] == "first_better" and m[1][0] == "second_better" and m[0][0] == "equal"
    text = E.format_matrix([DORAR, GRAD, LIME], m)
    assert text.splitlines()[0] == "method,dorar,grad,lime"
    ratio = E.verdict_matrix([DORAR, rec("z", 0.5, 0.0)], basis="ratio")
    assert ratio[0][1].startswith("n/a")


_acc = st.floats(0, 1, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(_acc, _acc, _acc, _acc, st.sampled_from([4, 8]), st.sampled_from([4, 8]))
def test_partial_order_is_antisymmetric(a1, a2, b1, b2, ne1, ne2):
    r1, r2 = rec("p", a1, a2, n_e=ne1), rec("q", b1, b2, n_e=ne2)
    v12 = E.compare_partial_order(r1, r2).verdict
    v21 = E.compare_partial_order(r2, r1).verdict
    flip = {"first_better": "second_better", "second_better": "first_better",
            "equal": "equal", "incomparable": "incomparable"}
    assert v21 == flip[v12]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(_acc, _acc), min_size=3, max_size=3))
def test_partial_order_is_transitive(pairs):
    r = [rec(str(i), a, b) for i, (a, b) in enumerate(pairs)]
    better = lambda x, y: E.compare_partial_order(x, y).verdict == "first_better"
    if better(r[0], r[1]) and better(r[1], r[2]):
        assert better(r[0], r[2])


def test_results_csv_round_trip(tmp_path):
    path = tmp_path / "results.csv"
    E.append_results(path, [DORAR])
    E.append_results(path, [GRAD])
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(E.RESULTS_HEADER)
    assert len(lines) == 3
    back = E.read_results(path)
    assert back == [DORAR, GRAD]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        E.read_results(bad)


def test_record_validation():
    with pytest.raises(ValueError):
        rec("bad", 1.2, 0.5)
    with pytest.raises(ValueError):
        rec("bad", 0.5, 0.5, a1s=-0.1)


def test_merge_records_matches_joint_statistics():
    parts = [E.EvaluationRecord("m", 4, "4x4", v, 0.0, 1 - v, 0.0, 1, "mnist", (i,), (v,), (1 - v,))
             for i, v in enumerate([0.7, 0.8, 0.75])]
    merged = E.merge_records(parts)
    assert merged.repetitions == 3 and merged.seeds == (0, 1, 2)
    assert merged.a1_mean == pytest.approx(0.75)
    assert merged.a1_std == pytest.approx(np.std([0.7, 0.8, 0.75], ddof=1))


# -------------------------------------------------------------- harness runs


def test_wrong_cardinality_is_rejected(toy_data, toy_blackbox):
    bad = E.ScoreSelector(lambda x: torch.zeros(len(x), 49), 4, "bad")
    half = E.FullSelector(GRID)
    with pytest.raises(ValueError, match="expected exactly n_e=4"):
        E.evaluate_selector(half, toy_data, toy_blackbox, 4, GRID, repetitions=1, **QUICK)
    # ties are hardened to exactly n_e units, so this one is fine
    E.evaluate_selector(bad, toy_data, toy_blackbox, 4, GRID, repetitions=1, **QUICK)


def test_full_mask_and_empty_complement(toy_data, toy_blackbox):
    r = E.evaluate_selector(E.FullSelector(GRID), toy_data, toy_blackbox, 49, GRID, repetitions=1, **QUICK)
    assert 0 <= r.a1_mean <= 1 and 0 <= r.a2_mean <= 1
    assert r.a1_std == 0.0


def test_evaluation_is_deterministic_and_std_uses_sample_formula(toy_data, toy_blackbox):
    sel = E.RandomSelector(GRID, 4, seed=1)
    a = E.evaluate_selector(sel, toy_data, toy_blackbox, 4, GRID, repetitions=2, **QUICK)
    b = E.evaluate_selector(sel, toy_data, toy_blackbox, 4, GRID, repetitions=2, **QUICK)
    assert a == b and a.a1_runs == b.a1_runs
    assert a.repetitions == 2 and a.seeds == (0, 1)
    assert a.a1_std == pytest.approx(np.std(a.a1_runs, ddof=1))


def test_evaluation_unaffected_by_global_rng(toy_data, toy_blackbox):
    sel = E.RandomSelector(GRID, 4, seed=1)
    torch.manual_seed(1)
    a = E.evaluate_selector(sel, toy_data, toy_blackbox, 4, GRID, repetitions=1, **QUICK)
    torch.manual_seed(999)
    b = E.evaluate_selector(sel, toy_data, toy_blackbox, 4, GRID, repetitions=1, **QUICK)
    assert a == b


def test_record_selector_matches_score_selector(toy_data, toy_blackbox):
    g = torch.Generator().manual_seed(0)
    n = len(toy_data.x_train) + len(toy_data.x_val) + len(toy_data.x_test)
    table = torch.rand(n, 49, generator=g)
    by_id = {i: table[i].numpy() for i in range(n)}
    recsel = E.RecordSelector(by_id, 4)
    x = toy_data.x_val[:5]
    off = len(toy_data.x_train)
    expected = E.ScoreSelector(lambda _: table[off:off + 5], 4).masks(x)
    assert torch.equal(recsel.masks(x, off), expected)
    with pytest.raises(KeyError):
        E.RecordSelector({}, 4).masks(x, 0)


def test_random_selector_masks_depend_on_position_only():
    sel = E.RandomSelector(GRID, 4, seed=3)
    x = torch.zeros(10, 1, 28, 28)
    a = sel.masks(x, offset=100)
    b = sel.masks(torch.ones(10, 1, 28, 28), offset=100)
    assert torch.equal(a, b)
    assert (a.sum(1) == 4).all()
    assert not torch.equal(a, sel.masks(x, offset=0))


def test_positional_selector_encodes_prediction(toy_data, toy_blackbox):
    sel = E.PositionalSelector.from_ink(toy_blackbox, toy_data.x_train, GRID, 3)
    m = sel.masks(toy_data.x_test)
    pred = toy_blackbox(toy_data.x_test).argmax(1)
    units = m.argmax(1)
    assert (m.sum(1) == 1).all()
    for c in range(3):
        assert len(set(units[pred == c].tolist())) <= 1
    assert len(set(units.tolist())) == len(set(pred.tolist()))
    excl = E.PositionalSelector.from_ink(toy_blackbox, toy_data.x_train, GRID, 3, exclude=range(0, 40))
    assert all(t.nonzero().item() >= 40 for t in excl.table)
    with pytest.raises(ValueError):
        E.PositionalSelector(toy_blackbox, [[0], [1, 2]], 49)
