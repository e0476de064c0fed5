import numpy as np
import pytest

from kwtse.evaluation import (
    EvalReport,
    ScoredSample,
    cosine_separation,
    detection_metrics,
    embedding_cosine,
    format_sweep,
    localization_errors,
    si_snri,
    si_snri_and_accuracy,
    sweep_thresholds,
)


def test_identity_output_has_zero_improvement():
    rng = np.random.default_rng(0)
    y, x = rng.normal(size=300), rng.normal(size=300)
    assert si_snri(y, x, x) == 0.0


def test_accuracy_counts_improvements_above_one_db():
    mean, acc = si_snri_and_accuracy([2.0, 0.5, 5.0])
    assert mean == pytest.approx(2.5)
    assert acc == pytest.approx(66.6667, abs=1e-3)
    with pytest.raises(ValueError):
        si_snri_and_accuracy([])


def test_detection_metric_examples():
    m = detection_metrics([True, False, True], [True, False, True])
    assert (m.precision, m.recall, m.f1) == (100.0, 100.0, 100.0)
    m = detection_metrics([True, True, True, False], [True, True, False, True])
    assert m.precision == pytest.approx(200 / 3) and m.recall == pytest.approx(200 / 3)
    assert m.f1 == pytest.approx(200 / 3)


def test_undefined_precision_is_absent():
    m = detection_metrics([False, False], [True, False])
    assert m.precision is None and m.f1 is None and m.recall == 0.0
    with pytest.raises(ValueError):
        detection_metrics([True], [True, False])


def test_localization_examples():
    assert localization_errors([(3, 9)], [(3, 9)]) == (0.0, 0.0)
    assert localization_errors([(12, 20)], [(10, 21)]) == (20.0, 10.0)
    with pytest.raises(ValueError):
        localization_errors([], [])


def test_cosine_examples():
    e = np.array([0.3, -2.0, 1.0])
    assert embedding_cosine(e, e) == pytest.approx(1.0)
    assert embedding_cosine([1.0, 0.0], [0.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        embedding_cosine([0.0, 0.0], [1.0, 0.0])


def test_cosine_separation_on_clusters():
    rng = np.random.default_rng(1)
    centres = rng.normal(size=(3, 8))
    embs = [centres[k] + 0.1 * rng.normal(size=8) for k in range(3) for _ in range(4)]
    same, cross = cosine_separation(embs, [k for k in range(3) for _ in range(4)])
    assert same > 0.9 and same - cross > 0.1


def scored_set(seed=2, n=60):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        present = bool(k % 2)
        score = float(rng.uniform(0.3, 1.0) if present else rng.uniform(0.0, 0.6))
        out.append(ScoredSample(score * 4, score, 5, 9, present, (5, 7) if present else None))
    return out


def test_sweep_recall_is_non_increasing():
    rows = sweep_thresholds(scored_set(), np.linspace(0, 1, 41))
    recalls = [r.recall for r in rows]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
    assert rows[0].recall == 100.0


def test_sweep_matches_single_threshold_metrics():
    scored = scored_set(3)
    row = sweep_thresholds(scored, [0.33, 0.5])[0]
    m = detection_metrics([s.normalized_score >= 0.33 for s in scored], [s.keyword_present for s in scored])
    assert (row.precision, row.recall, row.f1) == (m.precision, m.recall, m.f1)
    # end frame is j - 1 = 8 against a true end of 7
    assert (row.start_err_ms, row.end_err_ms) == (0.0, 10.0)


def test_sweep_is_order_independent():
    scored = scored_set(4)
    a = sweep_thresholds(scored, [0.2, 0.4, 0.6])
    b = sweep_thresholds(scored[::-1], [0.2, 0.4, 0.6])
    assert a == b


def test_sweep_needs_two_thresholds():
    with pytest.raises(ValueError):
        sweep_thresholds(scored_set(), [0.3])


def test_sweep_table_has_one_row_per_tau():
    table = format_sweep(sweep_thresholds(scored_set(), [0.23, 0.30, 0.33, 0.36, 0.48]))
    lines = table.splitlines()
    assert len(lines) == 6 and lines[0].split() == ["tau", "Pre.", "Rec.", "F1", "S", "Err.", "E", "Err."]


def test_report_bounds_and_serialisation():
    with pytest.raises(ValueError):
        EvalReport(accuracy=101.0)
    r = EvalReport(mean_si_snri=6.0, accuracy=90.0, f1=95.0, n_samples=3)
    assert '"f1": 95.0' in r.to_json()
    assert "SI-SNRi" in r.to_text()
