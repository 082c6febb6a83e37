import math
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memq.classifier import (
    ClassDistribution,
    ClassifierModel,
    InsufficientData,
    UniformClassifier,
    classification_metrics,
    classify,
    evaluate_classifier,
    read_labeled,
    train,
    write_labeled,
)
from memq.store import MemType
from memq.synthetic import split_labeled
from memq.text import analyze

S, E = MemType.SEMANTIC, MemType.EPISODIC


def nb_by_hand(examples, question, alpha=1.0):
    """Textbook multinomial NB posterior, computed without the model tables.

    Multiplicities are first divided by their gcd, the documented
    normalization that makes training invariant to wholesale duplication.
    """
    mult = Counter(examples)
    g = math.gcd(*mult.values())
    examples = [ex for ex, n in sorted(mult.items()) for _ in range(n // g)]
    docs = Counter(lbl for _, lbl in examples)
    toks = {S: Counter(), E: Counter()}
    for q, lbl in examples:
        toks[lbl].update(analyze(q))
    vocab = set(toks[S]) | set(toks[E])
    logp = {}
    for c in (S, E):
        total = sum(toks[c].values())
        lp = math.log(docs[c] / len(examples))
        for t in analyze(question):
            lp += math.log((toks[c][t] + alpha) / (total + alpha * len(vocab)))
        logp[c] = lp
    m = max(logp.values())
    z = sum(math.exp(v - m) for v in logp.values())
    return math.exp(logp[S] - m) / z


TWO = [("他的职业是什么", S), ("他们什么时候见面", E)]


def test_two_examples_hand_oracle():
    model = train(TWO)
    for q, lbl in TWO:
        d = classify(model, q)
        assert d.label == lbl
        assert d.p_semantic == pytest.approx(nb_by_hand(TWO, q), abs=1e-12)
    q = "职业和见面的时候"
    assert classify(model, q).p_semantic == pytest.approx(nb_by_hand(TWO, q), abs=1e-12)


def test_same_example_in_both_classes_prior_decides():
    # identical token counts per class: only the prior can separate them
    balanced = train([("同一个问题", S), ("同一个问题", E)])
    assert classify(balanced, "同一个问题").p_semantic == 0.5
    # counts 2 vs 1 per token: (2+1)/(2V+V) equals (1+1)/(V+V) under add-one
    skewed = train([("同一个问题", S), ("同一个问题", E), ("同一个问题", S)])
    d = classify(skewed, "同一个问题")
    assert d.p_semantic == pytest.approx(2 / 3, abs=1e-12)


def test_single_class_example_above_half():
    model = train([("她最喜欢的颜色", S), ("昨天下雨了我们去散步", E)])
    assert classify(model, "她最喜欢的颜色").p_semantic > 0.5


def test_empty_question_returns_priors():
    data = [("a", S), ("b", S), ("c", S), ("d", E)]
    d = classify(train(data), "")
    assert d.p_semantic == pytest.approx(0.75, abs=1e-12)
    assert d.p_episodic == pytest.approx(0.25, abs=1e-12)


def test_symmetric_data_novel_token():
    model = train([("甲", S), ("乙", E)])
    d = classify(model, "丙")
    assert d.p_semantic == 0.5 and d.p_episodic == 0.5


def test_requires_both_classes():
    with pytest.raises(InsufficientData):
        train([("x", S)])
    with pytest.raises(InsufficientData):
        train([])


questions = st.text(alphabet=st.sampled_from("他她的是什么时候见面职业去哪里abc "), min_size=1, max_size=12)
datasets = st.lists(st.tuples(questions, st.sampled_from([S, E])), min_size=2, max_size=12).filter(
    lambda xs: {lbl for _, lbl in xs} == {S, E} and all(analyze(q).tokens for q, _ in xs)
)


@settings(max_examples=80, deadline=None)
@given(datasets, questions)
def test_probabilities_well_formed(data, q):
    d = classify(train(data), q)
    assert math.isfinite(d.p_semantic) and math.isfinite(d.p_episodic)
    assert 0.0 <= d.p_semantic <= 1.0
    assert abs(d.p_semantic + d.p_episodic - 1.0) <= 1e-9


@settings(max_examples=80, deadline=None)
@given(datasets, questions)
def test_label_permutation_symmetry(data, q):
    swapped = [(x, E if lbl == S else S) for x, lbl in data]
    a, b = classify(train(data), q), classify(train(swapped), q)
    assert a.p_semantic == b.p_episodic
    assert a.p_episodic == b.p_semantic


@settings(max_examples=60, deadline=None)
@given(datasets, questions, st.integers(2, 5))
def test_duplication_invariance(data, q, n):
    assert classify(train(data), q) == classify(train(data * n), q)


@settings(max_examples=60, deadline=None)
@given(datasets, questions)
def test_matches_hand_oracle(data, q):
    assert classify(train(data), q).p_semantic == pytest.approx(nb_by_hand(data, q), abs=1e-9)


def test_long_question_stays_finite():
    model = train(TWO)
    q = " ".join(["职业"] * 5000)
    assert len(analyze(q)) >= 10_000
    d = classify(model, q)
    assert d.p_semantic + d.p_episodic == pytest.approx(1.0, abs=1e-9)
    assert d.label == S


def test_separable_keywords(full_corpus):
    train_set, test_set = split_labeled(full_corpus.labeled, seed=42)
    report = evaluate_classifier(train(train_set), test_set)
    assert report.accuracy >= 0.9


def test_metrics_perfect():
    gold = [S, E, E, S]
    r = classification_metrics(gold, gold)
    assert (r.precision, r.recall, r.f1, r.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_confusion_oracle():
    # 30 semantic (25 right), 20 episodic (16 right)
    gold = [S] * 30 + [E] * 20
    pred = [S] * 25 + [E] * 5 + [S] * 4 + [E] * 16
    r = classification_metrics(gold, pred)
    p_s, r_s = Fraction(25, 29), Fraction(25, 30)
    p_e, r_e = Fraction(16, 21), Fraction(16, 20)
    f_s, f_e = 2 * p_s * r_s / (p_s + r_s), 2 * p_e * r_e / (p_e + r_e)
    assert r.confusion == {"semantic": {"semantic": 25, "episodic": 5}, "episodic": {"semantic": 4, "episodic": 16}}
    assert r.accuracy == pytest.approx(float(Fraction(41, 50)), abs=1e-15)
    assert r.precision == pytest.approx(float((30 * p_s + 20 * p_e) / 50), abs=1e-15)
    assert r.recall == pytest.approx(float((30 * r_s + 20 * r_e) / 50), abs=1e-15)
    assert r.f1 == pytest.approx(float((30 * f_s + 20 * f_e) / 50), abs=1e-15)
    assert r.per_class["episodic"].support == 20


def test_model_persistence(tmp_path):
    model = train(TWO + [("她住在哪里", S)])
    path = tmp_path / "m.json"
    model.save(path)
    loaded = ClassifierModel.load(path)
    for q in ("他的职业", "见面", "", "完全陌生"):
        assert classify(loaded, q) == classify(model, q)
    assert loaded.to_json() == model.to_json()


def test_labeled_file_round_trip(tmp_path):
    path = tmp_path / "q.tsv"
    write_labeled(path, TWO)
    assert read_labeled(path) == TWO


def test_uniform_classifier():
    assert UniformClassifier().classify("任何问题") == ClassDistribution.uniform()


def test_distribution_validation():
    with pytest.raises(ValueError):
        ClassDistribution(0.7, 0.7)
    assert ClassDistribution(0.5, 0.5).label == S
