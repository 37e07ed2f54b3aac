import numpy as np
import pytest
from sklearn.metrics import precision_score, recall_score

from behavior_data import (
    Sample,
    SyntheticSpec,
    Vocabulary,
    build_samples,
    compute_frequency_profile,
    generate_synthetic_dataset,
    rule_oracle_predict,
)
from config import ModelConfig
from conftest import make_sample, random_samples
from evaluation import (
    BALANCED,
    REAL_DISTRIBUTION,
    compare_reports,
    confusion_counts,
    evaluate,
    evaluate_predictions,
    load_report,
    macro_accuracies,
    render_table,
    weighted_precision,
    weighted_recall,
    write_report,
)
from reference_model import init_model

AB = Vocabulary(("A", "B"))
LABELS = [0, 0, 0, 0, 1, 1]
PREDS = [0, 0, 0, 1, 1, 0]


def _profile(labels, vocab, **thresholds):
    return compute_frequency_profile([make_sample([0], y) for y in labels], vocab, **thresholds)


def test_hand_counted_confusion():
    counts = confusion_counts(PREDS, LABELS, 2)
    assert list(counts.tp) == [3, 1]
    assert list(counts.fn) == [1, 1]
    assert list(counts.fp) == [1, 1]


def test_all_correct_and_single_wrong():
    counts = confusion_counts([0, 1, 2], [0, 1, 2], 3)
    assert counts.fp.sum() == 0 and counts.fn.sum() == 0
    counts = confusion_counts([1], [0], 3)
    assert counts.tp[0] == 0 and counts.tp[1] == 0


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion_counts([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion_counts([], [], 2)
    with pytest.raises(ValueError):
        confusion_counts([2], [0], 2)


def test_weighted_metrics_on_the_six_sample_case():
    counts = confusion_counts(PREDS, LABELS, 2)
    assert weighted_precision(counts) == pytest.approx(2 / 3)
    assert weighted_recall(counts) == pytest.approx(4 / 6)
    perfect = confusion_counts(LABELS, LABELS, 2)
    assert weighted_precision(perfect) == 1.0
    assert weighted_recall(perfect) == 1.0


def test_macro_accuracy_on_the_six_sample_case():
    counts = confusion_counts(PREDS, LABELS, 2)
    macro = macro_accuracies(counts, ["head", "head"])
    assert macro["overall"] == pytest.approx(0.625)
    assert macro["head"] == pytest.approx(0.625)
    assert macro["medium"] is None and macro["tail"] is None


def test_all_head_report_renders_dashes():
    profile = _profile(LABELS, AB)
    report = evaluate_predictions(PREDS, LABELS, profile, AB, REAL_DISTRIBUTION, model_name="m")
    assert report.medium is None and report.tail is None
    table = render_table([("m", report)])
    header, rule, row = table.splitlines()
    assert header.split(" | ")[0].strip() == "Model"
    cells = [cell.strip() for cell in row.split(" | ")]
    assert cells == ["m", "0.6667", "0.6667", "0.6250", "0.6250", "-", "-"]


def _brute_force(preds, labels, categories, num_classes):
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    for p, y in zip(preds, labels):
        if p == y:
            tp[y] += 1
        else:
            fp[p] += 1
            fn[y] += 1
    n = len(labels)
    support = [tp[c] + fn[c] for c in range(num_classes)]
    precision = [tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0 for c in range(num_classes)]
    recall = {c: tp[c] / support[c] for c in range(num_classes) if support[c]}
    result = {
        "prec_w": sum(support[c] * precision[c] for c in range(num_classes)) / n,
        "rec_w": sum(tp) / n,
    }
    for key, members in (("overall", list(recall)),
                         ("head", [c for c in recall if categories[c] == "head"]),
                         ("medium", [c for c in recall if categories[c] == "medium"]),
                         ("tail", [c for c in recall if categories[c] == "tail"])):
        result[key] = sum(recall[c] for c in members) / len(members) if members else None
    return result


def test_matches_brute_force_and_sklearn_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        num_classes = int(rng.integers(2, 9))
        n = int(rng.integers(1, 60))
        vocab = Vocabulary(tuple(f"b{i}" for i in range(num_classes)))
        labels = rng.integers(num_classes, size=n)
        preds = rng.integers(num_classes, size=n)
        profile = _profile(rng.integers(num_classes, size=200), vocab, head_threshold=0.2,
                           medium_threshold=0.1)
        report = evaluate_predictions(preds, labels, profile, vocab, BALANCED)
        expected = _brute_force(preds.tolist(), labels.tolist(), profile.frequency_category, num_classes)
        for key, value in expected.items():
            if value is None:
                assert report.metric(key) is None
            else:
                assert report.metric(key) == pytest.approx(value, abs=1e-12)

        classes = list(range(num_classes))
        assert report.prec_w == pytest.approx(
            precision_score(labels, preds, labels=classes, average="weighted", zero_division=0), abs=1e-12)
        assert report.rec_w == pytest.approx(
            recall_score(labels, preds, labels=classes, average="weighted", zero_division=0), abs=1e-12)
        assert report.rec_w == pytest.approx(np.mean(preds == labels), abs=1e-12)


def test_metrics_are_bounded_and_permutation_invariant():
    rng = np.random.default_rng(1)
    vocab = Vocabulary(tuple(f"b{i}" for i in range(6)))
    labels = rng.integers(6, size=80)
    preds = rng.integers(6, size=80)
    profile = _profile(labels, vocab)
    report = evaluate_predictions(preds, labels, profile, vocab, REAL_DISTRIBUTION)
    order = rng.permutation(80)
    shuffled = evaluate_predictions(preds[order], labels[order], profile, vocab, REAL_DISTRIBUTION)
    assert shuffled.model_dump() == report.model_dump()
    for key in ("prec_w", "rec_w", "overall", "head", "medium", "tail"):
        value = report.metric(key)
        assert value is None or 0.0 <= value <= 1.0


def test_precision_can_be_weighted_by_prediction_count():
    counts = confusion_counts([0, 0, 0, 0, 0, 1], LABELS, 2)
    assert weighted_precision(counts, "predicted") == pytest.approx((5 * 0.8 + 1 * 1.0) / 6)
    assert weighted_precision(counts) == pytest.approx((4 * 0.8 + 2 * 1.0) / 6)
    with pytest.raises(ValueError):
        weighted_precision(counts, "macro")


def test_constant_model_scores_one_over_vocabulary_size():
    vocab = Vocabulary(tuple(f"b{i}" for i in range(30)))
    config = ModelConfig(embedding_dim=4, hidden_dim=6, location_buckets=4, history_length=3)
    params = init_model(vocab, config, np.random.default_rng(0))
    for name, array in params.arrays.items():
        params.arrays[name] = np.zeros_like(array)
    rng = np.random.default_rng(2)
    samples = [Sample(s.history, i // 4, s.target_context)
               for i, s in enumerate(random_samples(rng, 120, 30, 3))]
    profile = compute_frequency_profile(samples, vocab)
    report = evaluate(params, samples, profile, BALANCED)
    assert report.overall == pytest.approx(1 / 30)
    assert report.per_class[0].recall == 1.0


def test_uniform_random_guesses_stay_near_chance():
    rng = np.random.default_rng(3)
    vocab = Vocabulary(tuple(f"b{i}" for i in range(30)))
    labels = np.repeat(np.arange(30), 100)
    preds = rng.integers(30, size=labels.size)
    report = evaluate_predictions(preds, labels, _profile(labels, vocab), vocab, BALANCED)
    sigma = np.sqrt((1 / 30) * (29 / 30) / labels.size)
    assert abs(report.overall - 1 / 30) <= 3 * sigma


def test_rule_oracle_scores_perfectly():
    spec = SyntheticSpec(num_behaviors=8, num_users=10, num_samples=300, markov_coherence=1.0,
                         history_length=4, rng_seed=4)
    log, rules = generate_synthetic_dataset(spec)
    samples = build_samples(log, 4)
    profile = compute_frequency_profile(samples, log.vocabulary)
    preds = [rule_oracle_predict(rules, s) for s in samples]
    report = evaluate_predictions(preds, [s.target for s in samples], profile, log.vocabulary, REAL_DISTRIBUTION)
    for key in ("prec_w", "rec_w", "overall", "head", "medium", "tail"):
        assert report.metric(key) in (None, 1.0)
    assert report.overall == 1.0


def test_repeated_evaluation_is_identical(tiny_params, tiny_vocab):
    samples = random_samples(np.random.default_rng(4), 50, 5, 3)
    profile = compute_frequency_profile(samples, tiny_vocab)
    reports = [evaluate(tiny_params, samples, profile, REAL_DISTRIBUTION).model_dump() for _ in range(5)]
    assert all(r == reports[0] for r in reports)


def test_evaluate_errors(tiny_params, tiny_vocab):
    samples = random_samples(np.random.default_rng(5), 10, 5, 3)
    profile = compute_frequency_profile(samples, tiny_vocab)
    with pytest.raises(ValueError):
        evaluate(tiny_params, [], profile, BALANCED)
    with pytest.raises(ValueError):
        evaluate(tiny_params, samples, profile, "leave-one-out")


def test_report_round_trip(tmp_path):
    report = evaluate_predictions(PREDS, LABELS, _profile(LABELS, AB), AB, BALANCED, model_name="stage_b")
    path = tmp_path / "reports" / "stage_b.json"
    write_report(report, path)
    assert load_report(path) == report


def test_compare_reports_deltas_and_ratios():
    profile = _profile(LABELS, AB)
    base = evaluate_predictions(PREDS, LABELS, profile, AB, BALANCED, model_name="a")
    other = evaluate_predictions(LABELS, LABELS, profile, AB, BALANCED, model_name="b")
    comparison = compare_reports(base, other)
    assert comparison.metrics["overall"].delta == pytest.approx(0.375)
    assert comparison.metrics["overall"].ratio == pytest.approx(1.6)
    assert comparison.metrics["tail"].delta is None

    worst = evaluate_predictions([1, 1, 1, 1, 0, 0], LABELS, profile, AB, BALANCED)
    assert compare_reports(worst, other).metrics["rec_w"].ratio is None
