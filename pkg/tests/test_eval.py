from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scenessl.data import PLACES8_CLASSES
from scenessl.errors import ContractError
from scenessl.eval import (
    ConfusionMatrix,
    balanced_accuracy,
    evaluate,
    evaluate_predictions,
    grouped_report,
    grouped_tsv,
    plain_accuracy,
)
from scenessl.model import EncoderConfig, ModelConfig, ProjectionConfig, SceneModel
from scenessl.numerics import Rng

NAMES = tuple(PLACES8_CLASSES)


def one_hot(pred_idx, c=8):
    p = np.full((len(pred_idx), c), 0.01)
    p[np.arange(len(pred_idx)), pred_idx] = 0.93
    return p


def fixture_from_recalls(recalls, classes=NAMES, prefix="img"):
    """Predictions whose per-class recalls equal the given fractions exactly.

    Class ``i`` gets ``denominator`` samples of which ``numerator`` are
    predicted correctly; the misses go to the next class.
    """
    true, pred = [], []
    for i, r in enumerate(recalls):
        r = Fraction(r)
        n, k = r.denominator, r.numerator
        true += [classes[i]] * n
        pred += [i] * k + [(i + 1) % len(classes)] * (n - k)
    uris = [f"{prefix}{j}" for j in range(len(true))]
    return true, one_hot(pred, len(classes)), uris


def test_identity_counts():
    cm = ConfusionMatrix(np.eye(8, dtype=int) * 5, NAMES)
    assert balanced_accuracy(cm).value == 1.0 and plain_accuracy(cm) == 1.0


def test_two_class_half():
    cm = ConfusionMatrix(np.array([[4, 0], [3, 0]]), ("a", "b"))
    assert balanced_accuracy(cm).value == 0.5


def test_empty_matrix_is_an_error():
    with pytest.raises(ContractError):
        balanced_accuracy(ConfusionMatrix(np.zeros((2, 2), int), ("a", "b")))


def test_uniform_predictor_is_near_chance():
    values = []
    for seed in range(20):
        rng = Rng(seed)
        y = np.repeat(np.arange(8), 500)
        cm = ConfusionMatrix.from_predictions(y, rng.integers(0, 8, len(y)), NAMES)
        values.append(balanced_accuracy(cm).value)
    assert all(abs(v - 0.125) <= 0.02 for v in values)


def test_perfect_predictor_report():
    true = [NAMES[i % 8] for i in range(24)]
    rep = evaluate_predictions(true, one_hot([i % 8 for i in range(24)]), NAMES)
    assert rep.accuracy == 1.0 and rep.balanced_accuracy == 1.0
    assert np.array_equal(rep.confusion.counts, np.eye(8, dtype=int) * 3)


def test_62_of_80_is_775():
    true = [NAMES[i // 10] for i in range(80)]
    pred = [i // 10 if i < 62 else (i // 10 + 1) % 8 for i in range(80)]
    correct = sum(p == i // 10 for i, p in enumerate(pred))
    assert correct == 62
    rep = evaluate_predictions(true, one_hot(pred), NAMES)
    assert rep.accuracy == 0.775


def test_six_supported_classes():
    present = [n for n in NAMES if n not in ("classroom", "dressing room")]
    true = [n for n in present for _ in range(4)]
    pred = [NAMES.index(n) for n in true]
    pred[0] = NAMES.index("classroom")
    rep = evaluate_predictions(true, one_hot(pred), NAMES)
    assert rep.excluded == ("classroom", "dressing room")
    assert set(rep.recalls) == set(present)
    assert rep.balanced_accuracy == pytest.approx((5 + 0.75) / 6, abs=1e-15)


def test_class_absent_from_head_is_listed():
    with pytest.raises(ContractError, match="kitchen"):
        evaluate_predictions(["kitchen", "bedroom"], one_hot([0, 1]), NAMES)


def test_audit_list_has_confidences():
    rep = evaluate_predictions(["bedroom", "studio"], one_hot([1, 0]), NAMES, uris=["a.png", "b.png"])
    assert rep.predictions[0] == ("a.png", "bedroom", "bedroom", pytest.approx(0.93))
    lines = rep.audit_tsv().splitlines()
    assert lines[0] == "uri\ttrue\tpredicted\tconfidence\tcorrect" and lines[2].endswith("\t0")


def test_grouped_fixture_reproduces_400_and_341():
    # group A: five classes at recall 2/5 → 0.400
    # group B: six classes, recalls sum to 1023/500 → mean 1023/3000 = 0.341
    ra = [Fraction(2, 5)] * 5
    rb = [Fraction(k, 500) for k in (250, 200, 180, 150, 143, 100)]
    ta, pa, ua = fixture_from_recalls(ra, prefix="first")
    tb, pb, ub = fixture_from_recalls(rb, prefix="second")
    rep = evaluate_predictions(ta + tb, np.vstack([pa, pb]), NAMES, ua + ub)
    groups = {u: "group-a" for u in ua} | {u: "group-b" for u in ub}
    rows = {r.group: r for r in grouped_report(rep, groups, known_groups={"group-a", "group-b"})}
    assert rows["group-a"].report.balanced_accuracy == pytest.approx(0.400, abs=1e-12)
    assert rows["group-b"].report.balanced_accuracy == pytest.approx(0.341, abs=1e-12)
    assert rows["group-a"].histogram["bathroom"] == 5
    assert len(grouped_tsv(list(rows.values())).splitlines()) == 3


def test_single_group_equals_overall():
    true, probs, uris = fixture_from_recalls([Fraction(1, 2), Fraction(3, 4), Fraction(1, 3)])
    rep = evaluate_predictions(true, probs, NAMES, uris)
    (row,) = grouped_report(rep, {u: "all" for u in uris})
    assert row.report.balanced_accuracy == rep.balanced_accuracy
    assert np.array_equal(row.report.confusion.counts, rep.confusion.counts)


def test_unknown_or_missing_group_tag():
    true, probs, uris = fixture_from_recalls([Fraction(1, 2)])
    rep = evaluate_predictions(true, probs, NAMES, uris)
    with pytest.raises(ContractError):
        grouped_report(rep, {uris[0]: "x"})
    with pytest.raises(ContractError):
        grouped_report(rep, {u: "weird" for u in uris}, known_groups={"a"})


def test_confusion_tsv_percent_rows_sum_to_100():
    cm = ConfusionMatrix.from_predictions([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], ("a", "b", "c"))
    rows = [line.split("\t")[1:] for line in cm.to_tsv(percent=True).splitlines()[1:]]
    assert sum(float(x) for x in rows[0]) == pytest.approx(100.0)
    assert rows[2] == ["", "", ""]


def test_evaluate_with_model():
    enc = EncoderConfig(input_size=(16, 16, 3), stage_widths=(8,), blocks_per_stage=(1,), embedding_dim=8)
    model = SceneModel(ModelConfig(enc, ProjectionConfig(8, 8), num_classes=8), Rng(0))
    imgs = Rng(1).uniform(0, 1, (10, 3, 16, 16)).astype(np.float32)
    rep = evaluate(model, imgs, [NAMES[i % 8] for i in range(10)], NAMES)
    assert rep.confusion.total == 10 and 0 <= rep.balanced_accuracy <= 1


# -- properties -------------------------------------------------------------

counts_strategy = st.lists(st.lists(st.integers(0, 20), min_size=4, max_size=4), min_size=4, max_size=4)


@given(counts_strategy, st.integers(0, 3), st.integers(2, 5))
def test_duplicating_a_class_keeps_balanced_accuracy(counts, cls, factor):
    c = np.array(counts)
    if c.sum() == 0:
        return
    dup = c.copy()
    dup[cls] *= factor
    names = tuple("abcd")
    assert balanced_accuracy(ConfusionMatrix(dup, names)).value == pytest.approx(
        balanced_accuracy(ConfusionMatrix(c, names)).value, abs=1e-12)


@given(st.lists(st.lists(st.integers(0, 3), min_size=4, max_size=4), min_size=4, max_size=4))
def test_balanced_equals_plain_on_balanced_sets(rows):
    c = np.array(rows)
    np.fill_diagonal(c, 0)
    np.fill_diagonal(c, 10 - c.sum(axis=1))  # every class has support 10
    cm = ConfusionMatrix(c, tuple("abcd"))
    assert balanced_accuracy(cm).value == pytest.approx(plain_accuracy(cm), abs=1e-12)


@given(counts_strategy)
def test_normalized_rows(counts):
    cm = ConfusionMatrix(np.array(counts), tuple("abcd"))
    norm = cm.normalized()
    for i, row in enumerate(norm):
        if cm.support[i] == 0:
            assert np.isnan(row).all()
        else:
            assert ((row >= 0) & (row <= 1)).all() and abs(row.sum() - 1) < 1e-9
    assert cm.total == sum(map(sum, counts))
