"""Question classifier: semantic vs episodic memory.

The native model is multinomial naive Bayes over the shared tokenizer. Any
object with a ``classify(question) -> ClassDistribution`` method can stand in
for it (see :class:`QuestionClassifier`).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .store import MemType
from .text import analyze

MODEL_FORMAT = "memq-nb"
MODEL_VERSION = 1
CLASSES = (MemType.SEMANTIC, MemType.EPISODIC)


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class ClassDistribution:
    p_semantic: float
    p_episodic: float

    def __post_init__(self):
        for p in (self.p_semantic, self.p_episodic):
            if not (0.0 <= p <= 1.0) or math.isnan(p):
                raise ValueError(f"probability out of range: {p}")
        if abs(self.p_semantic + self.p_episodic - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")

    @classmethod
    def uniform(cls) -> ClassDistribution:
        return cls(0.5, 0.5)

    @classmethod
    def certain(cls, label: MemType) -> ClassDistribution:
        return cls(1.0, 0.0) if label == MemType.SEMANTIC else cls(0.0, 1.0)

    @property
    def label(self) -> MemType:
        # semantic wins ties
        return MemType.SEMANTIC if self.p_semantic >= self.p_episodic else MemType.EPISODIC

    @property
    def confidence(self) -> float:
        return max(self.p_semantic, self.p_episodic)

    def prob(self, mem_type: MemType) -> float:
        return self.p_semantic if mem_type == MemType.SEMANTIC else self.p_episodic


class QuestionClassifier(Protocol):
    def classify(self, question: str) -> ClassDistribution: ...


class UniformClassifier:
    """No-op classifier: every question gets (0.5, 0.5)."""

    def classify(self, question: str) -> ClassDistribution:
        return ClassDistribution.uniform()


def _from_logits(a: float, b: float) -> ClassDistribution:
    # two-class softmax; stable for any finite difference
    d = b - a
    if d > 0:
        e = math.exp(-d)
        return ClassDistribution(e / (1.0 + e), 1.0 / (1.0 + e))
    e = math.exp(d)
    return ClassDistribution(1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class ClassifierModel:
    vocabulary: dict[str, int]
    log_priors: tuple[float, float]
    log_likelihoods: tuple[tuple[float, ...], tuple[float, ...]]
    log_unseen: tuple[float, float]
    smoothing: float

    def classify(self, question: str) -> ClassDistribution:
        return classify(self, question)

    def to_json(self) -> str:
        tokens = sorted(self.vocabulary, key=self.vocabulary.__getitem__)
        return json.dumps(
            {
                "format": MODEL_FORMAT,
                "version": MODEL_VERSION,
                "classes": [c.value for c in CLASSES],
                "smoothing": self.smoothing,
                "log_priors": list(self.log_priors),
                "log_unseen": list(self.log_unseen),
                "tokens": tokens,
                "log_likelihoods": [list(row) for row in self.log_likelihoods],
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> ClassifierModel:
        obj = json.loads(text)
        if obj.get("format") != MODEL_FORMAT or obj.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model file: {obj.get('format')} v{obj.get('version')}")
        return cls(
            vocabulary={t: i for i, t in enumerate(obj["tokens"])},
            log_priors=tuple(obj["log_priors"]),
            log_likelihoods=tuple(tuple(r) for r in obj["log_likelihoods"]),
            log_unseen=tuple(obj["log_unseen"]),
            smoothing=obj["smoothing"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ClassifierModel:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def train(
    examples: Iterable[tuple[str, MemType | str]],
    smoothing: float = 1.0,
) -> ClassifierModel:
    """Fit multinomial naive Bayes with additive smoothing.

    Example multiplicities are divided by their common gcd first, so a
    training set repeated n times yields the same model as the original.
    """
    if not smoothing > 0:
        raise ValueError("smoothing must be positive")
    multiset = Counter((q, MemType(label)) for q, label in examples)
    if not multiset:
        raise InsufficientData("no examples")
    g = reduce(math.gcd, multiset.values(), 0)
    doc_counts = [0, 0]
    tok_counts: list[Counter[str]] = [Counter(), Counter()]
    for (q, label), n in sorted(multiset.items(), key=lambda kv: (kv[0][1].value, kv[0][0])):
        w = n // g
        ci = CLASSES.index(label)
        doc_counts[ci] += w
        for t in analyze(q):
            tok_counts[ci][t] += w
    for ci, c in enumerate(CLASSES):
        if doc_counts[ci] == 0:
            raise InsufficientData(f"no {c.value} examples")

    vocab_tokens = sorted(set(tok_counts[0]) | set(tok_counts[1]))
    if not vocab_tokens:
        raise InsufficientData("training questions contain no tokens")
    vocabulary = {t: i for i, t in enumerate(vocab_tokens)}
    n_docs = sum(doc_counts)
    log_priors = tuple(math.log(doc_counts[ci] / n_docs) for ci in range(2))
    v = len(vocab_tokens)
    rows = []
    unseen = []
    for ci in range(2):
        denom = sum(tok_counts[ci].values()) + smoothing * v
        rows.append(tuple(math.log((tok_counts[ci][t] + smoothing) / denom) for t in vocab_tokens))
        unseen.append(math.log(smoothing / denom))
    return ClassifierModel(vocabulary, log_priors, tuple(rows), tuple(unseen), smoothing)


def classify(model: ClassifierModel, question: str) -> ClassDistribution:
    """Posterior over memory types; an empty question returns the priors."""
    scores = list(model.log_priors)
    for t in analyze(question):
        idx = model.vocabulary.get(t)
        for ci in range(2):
            scores[ci] += model.log_unseen[ci] if idx is None else model.log_likelihoods[ci][idx]
    return _from_logits(scores[0], scores[1])


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassificationReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    per_class: dict[str, ClassMetrics]
    confusion: dict[str, dict[str, int]]
    n: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "n": self.n,
            "per_class": {k: vars(v) for k, v in self.per_class.items()},
            "confusion": self.confusion,
        }


def classification_metrics(gold: Sequence[MemType | str], predicted: Sequence[MemType | str]) -> ClassificationReport:
    """Support-weighted precision/recall/F1 plus accuracy."""
    if len(gold) != len(predicted):
        raise ValueError("gold and predicted lengths differ")
    if not gold:
        raise ValueError("empty test set")
    gold = [MemType(g) for g in gold]
    predicted = [MemType(p) for p in predicted]
    confusion = {g.value: {p.value: 0 for p in CLASSES} for g in CLASSES}
    for g, p in zip(gold, predicted):
        confusion[g.value][p.value] += 1
    n = len(gold)
    per_class = {}
    for c in CLASSES:
        tp = confusion[c.value][c.value]
        pred_c = sum(confusion[g.value][c.value] for g in CLASSES)
        support = sum(confusion[c.value].values())
        prec = tp / pred_c if pred_c else 0.0
        rec = tp / support if support else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[c.value] = ClassMetrics(prec, rec, f1, support)
    weighted = {
        name: sum(getattr(m, name) * m.support for m in per_class.values()) / n
        for name in ("precision", "recall", "f1")
    }
    accuracy = sum(confusion[c.value][c.value] for c in CLASSES) / n
    return ClassificationReport(
        weighted["precision"], weighted["recall"], weighted["f1"], accuracy, per_class, confusion, n
    )


def evaluate_classifier(
    model: QuestionClassifier, test: Sequence[tuple[str, MemType | str]]
) -> ClassificationReport:
    gold = [label for _, label in test]
    predicted = [model.classify(q).label for q, _ in test]
    return classification_metrics(gold, predicted)


def read_labeled(path: str | Path) -> list[tuple[str, MemType]]:
    """Read ``label<TAB>question`` lines; blank lines and ``#`` comments skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        label, sep, question = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'label<TAB>question'")
        try:
            out.append((question, MemType(label.strip().lower())))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: unknown label {label!r}") from None
    return out


def write_labeled(path: str | Path, examples: Iterable[tuple[str, MemType]]) -> None:
    Path(path).write_text(
        "".join(f"{MemType(label).value}\t{q}\n" for q, label in examples), encoding="utf-8"
    )
