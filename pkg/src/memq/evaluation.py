"""Retrieval and synthesis metrics, and the ablation harness."""

from __future__ import annotations

import json
import logging
import random
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classifier import ClassDistribution, QuestionClassifier, classification_metrics
from .rerank import RerankConfig, rerank
from .retriever import IndexStore, RankedCandidate, retrieve, retrieve_per_type
from .store import MemoryItem, QAItem
from .synthesis import (
    ANSWER_TEMPLATE_V1,
    GenerationBackend,
    GenerationParams,
    GenerationRequest,
    PromptTemplate,
    build_prompt,
    generate,
    generate_many,
)
from .text import normalize

log = logging.getLogger(__name__)

RECALL_KS = (1, 2, 3, 5)


class NoScorableQuestions(ValueError):
    pass


class Pipeline(str, Enum):
    W_MC_R = "w-mc+r"
    WO_MC_W_R = "w/o-mc+w-r"
    WO_MC_R = "w/o-mc+r"


class MemoryCondition(str, Enum):
    NR = "nr"
    IR = "ir"
    CR = "cr"
    RETRIEVED = "retrieved"


@dataclass(frozen=True)
class AblationSetting:
    pipeline: Pipeline
    memory_condition: MemoryCondition = MemoryCondition.RETRIEVED

    @property
    def effective_condition(self) -> MemoryCondition:
        # no retrieval at all means nothing reaches the prompt
        if self.pipeline == Pipeline.WO_MC_R:
            return MemoryCondition.NR
        return self.memory_condition

    @property
    def label(self) -> str:
        return f"{self.pipeline.value}/{self.memory_condition.value}"


# --------------------------------------------------------------------------
# Metrics


def recall_at_k(
    retrieved: Mapping[str, Sequence[str]],
    gold: Mapping[str, Sequence[str]],
    k: int,
) -> float:
    """Share of questions with at least one gold id in their top ``k``.

    Questions without gold ids are skipped; returns 0.0 if none remain.
    """
    scored = [qid for qid in sorted(retrieved) if gold.get(qid)]
    if not scored:
        return 0.0
    hits = sum(1 for qid in scored if set(retrieved[qid][:k]) & set(gold[qid]))
    return hits / len(scored)


def em_count(response: str, anchors: Sequence[str]) -> int:
    """Number of anchor entries whose normalized text occurs in the normalized response."""
    haystack = normalize(response)
    return sum(1 for a in anchors if normalize(a) in haystack)


@dataclass(frozen=True)
class MapResult:
    score: float
    n_scored: int
    excluded: tuple[str, ...]
    per_question: dict[str, float]


def map_memory_anchors(responses: Mapping[str, str], qa: Sequence[QAItem]) -> MapResult:
    """Mean over questions of matched anchors / anchors, in the response.

    Questions with no anchors are left out of the mean and listed in
    ``excluded``. A question missing from ``responses`` counts as an empty
    response.
    """
    fractions: dict[str, float] = {}
    excluded = []
    for q in sorted(qa, key=lambda q: q.qa_id):
        if not q.anchors:
            excluded.append(q.qa_id)
            continue
        texts = [a.text for a in q.anchors]
        fractions[q.qa_id] = em_count(responses.get(q.qa_id, ""), texts) / len(texts)
    if not fractions:
        raise NoScorableQuestions("no question has memory anchors")
    return MapResult(
        sum(fractions.values()) / len(fractions), len(fractions), tuple(excluded), fractions
    )


# --------------------------------------------------------------------------
# Harness


@dataclass
class EvalConfig:
    rerank: RerankConfig = field(default_factory=RerankConfig)
    recall_ks: tuple[int, ...] = RECALL_KS
    template: PromptTemplate = ANSWER_TEMPLATE_V1
    params: GenerationParams = field(default_factory=GenerationParams)
    seed: int = 0
    max_in_flight: int = 4
    classify_memories: bool = False

    @property
    def k(self) -> int:
        return self.rerank.k


@dataclass
class QuestionRecord:
    qa_id: str
    retrieved: list[str]
    response: str
    anchors_hit: int
    anchors_total: int
    ranking: list[str] = field(default_factory=list)
    predicted_type: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        d = {
            "qa_id": self.qa_id,
            "retrieved": self.retrieved,
            "response": self.response,
            "anchors_hit": self.anchors_hit,
            "anchors_total": self.anchors_total,
        }
        if self.predicted_type is not None:
            d["predicted_type"] = self.predicted_type
        if self.error is not None:
            d["error"] = self.error
        return d


@dataclass
class EvalReport:
    setting: AblationSetting
    n_questions: int
    recall_at_k: dict[int, float]
    map_score: float
    classification_metrics: dict | None
    latency_stats: dict[str, dict[str, float]]
    per_question: list[QuestionRecord]
    excluded_from_map: list[str] = field(default_factory=list)
    excluded_from_recall: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    k: int = 3
    backend: str = ""

    def to_dict(self, timing: bool = False) -> dict:
        """Serializable form. Wall-clock latencies only when ``timing`` is set,
        so that the default form is reproducible byte for byte."""
        d = {
            "pipeline": self.setting.pipeline.value,
            "condition": self.setting.memory_condition.value,
            "backend": self.backend,
            "k": self.k,
            "n_questions": self.n_questions,
            "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())},
            "map": self.map_score,
            "classification": self.classification_metrics,
            "excluded_from_map": self.excluded_from_map,
            "excluded_from_recall": self.excluded_from_recall,
            "failed": self.failed,
            "per_question": [r.to_dict() for r in self.per_question],
        }
        if timing:
            d["latency"] = self.latency_stats
        return d


def _latency(samples: Iterable[float]) -> dict[str, float]:
    arr = np.asarray(list(samples), dtype=float)
    if arr.size == 0:
        return {"mean": 0.0, "p95": 0.0, "n": 0}
    return {"mean": float(arr.mean()), "p95": float(np.percentile(arr, 95)), "n": int(arr.size)}


def incorrect_memories(store: IndexStore, q: QAItem, k: int, seed: int) -> list[MemoryItem]:
    """Most confusable wrong memories: top BM25 items of the same character
    that are not references. Falls back to a seeded pick from another
    character when the character has nothing else."""
    gold = set(q.reference_item_ids)
    index = store.indexes.get(q.character_id)
    if index is not None:
        ranked = retrieve(index, q.question, index.doc_count)
        wrong = [c.item_id for c in ranked if c.item_id not in gold][:k]
        if wrong:
            return [store.by_id[i] for i in wrong]
    others = sorted(it.item_id for it in store.items if it.character_id != q.character_id)
    if not others:
        return []
    rng = random.Random(f"{seed}:{q.qa_id}")
    return [store.by_id[rng.choice(others)]]


def _retrieve_for(
    store: IndexStore,
    q: QAItem,
    pipeline: Pipeline,
    dist: ClassDistribution | None,
    cfg: EvalConfig,
    classifier: QuestionClassifier | None,
    depth: int,
) -> tuple[list[RankedCandidate], list[RankedCandidate]]:
    """(candidates for the prompt, deeper ranking for Recall@K)."""
    index = store.indexes[q.character_id]
    if pipeline == Pipeline.WO_MC_W_R:
        ranking = retrieve(index, q.question, max(depth, cfg.k))
        return ranking[: cfg.k], ranking
    assert dist is not None
    mem_dists = None
    if cfg.classify_memories and classifier is not None:
        mem_dists = {}

    def run(kk: int) -> list[RankedCandidate]:
        pool = retrieve_per_type(index, q.question, kk)
        if mem_dists is not None:
            for c in pool:
                if c.item_id not in mem_dists:
                    mem_dists[c.item_id] = classifier.classify(store.by_id[c.item_id].text)
        rcfg = RerankConfig(cfg.rerank.alpha, cfg.rerank.beta, kk, cfg.rerank.normalize_scores)
        return rerank(pool, dist, rcfg, mem_dists)

    return run(cfg.k), run(max(depth, cfg.k))


def run_ablation(
    store: IndexStore,
    qa: Sequence[QAItem],
    setting: AblationSetting,
    backend: GenerationBackend,
    cfg: EvalConfig = EvalConfig(),
    classifier: QuestionClassifier | None = None,
) -> EvalReport:
    """Answer every question under ``setting`` and score the responses."""
    qa = sorted(qa, key=lambda q: q.qa_id)
    pipeline, condition = setting.pipeline, setting.effective_condition
    if pipeline == Pipeline.W_MC_R and condition == MemoryCondition.RETRIEVED and classifier is None:
        raise ValueError("the w-mc+r pipeline needs a classifier")
    depth = max(cfg.recall_ks, default=cfg.k)
    timings: dict[str, list[float]] = {"classify": [], "retrieve": [], "generate": []}

    records: list[QuestionRecord] = []
    requests: list[GenerationRequest] = []
    rankings: dict[str, list[str]] = {}
    gold_labels, predicted = [], []
    missing_chars = []
    for q in qa:
        memories: list[MemoryItem] = []
        pred = None
        if condition == MemoryCondition.CR:
            memories = [store.by_id[i] for i in q.reference_item_ids if i in store.by_id]
        elif condition == MemoryCondition.IR:
            memories = incorrect_memories(store, q, cfg.k, cfg.seed)
        elif condition == MemoryCondition.RETRIEVED:
            if q.character_id not in store.indexes:
                missing_chars.append(q.qa_id)
            else:
                dist = None
                if pipeline == Pipeline.W_MC_R:
                    t0 = time.perf_counter()
                    dist = classifier.classify(q.question)
                    timings["classify"].append(time.perf_counter() - t0)
                    pred = dist.label.value
                    if q.reference_item_ids and q.reference_item_ids[0] in store.by_id:
                        gold_labels.append(store.by_id[q.reference_item_ids[0]].mem_type)
                        predicted.append(dist.label)
                t0 = time.perf_counter()
                top, ranking = _retrieve_for(store, q, pipeline, dist, cfg, classifier, depth)
                timings["retrieve"].append(time.perf_counter() - t0)
                memories = [store.by_id[c.item_id] for c in top]
                rankings[q.qa_id] = [c.item_id for c in ranking]
        prompt = build_prompt(cfg.template, q.question, memories)
        requests.append(GenerationRequest(prompt, q.question, tuple(memories)))
        records.append(
            QuestionRecord(q.qa_id, [m.item_id for m in memories], "", 0, len(q.anchors), predicted_type=pred)
        )
    if missing_chars:
        log.warning("%d questions name characters without an index", len(missing_chars))

    t0 = time.perf_counter()
    outcome = generate_many(backend, requests, cfg.params, cfg.max_in_flight)
    timings["generate"] = [r.latency for r in outcome.results if r is not None]
    log.info("generated %d responses in %.2fs", len(requests), time.perf_counter() - t0)

    responses = {}
    failed = []
    for q, rec, res, err in zip(qa, records, outcome.results, outcome.errors):
        if res is None:
            rec.error = f"{type(err).__name__}: {err}"
            failed.append(q.qa_id)
            continue
        rec.response = res.text
        responses[q.qa_id] = res.text
        rec.anchors_hit = em_count(res.text, [a.text for a in q.anchors])

    try:
        m = map_memory_anchors(responses, qa)
        map_score, excluded = m.score, list(m.excluded)
    except NoScorableQuestions:
        map_score, excluded = 0.0, [q.qa_id for q in qa]

    recall: dict[int, float] = {}
    excluded_recall: list[str] = []
    if condition == MemoryCondition.RETRIEVED:
        gold = {q.qa_id: list(q.reference_item_ids) for q in qa}
        excluded_recall = [q.qa_id for q in qa if not q.reference_item_ids]
        recall = {k: recall_at_k(rankings, gold, k) for k in cfg.recall_ks}

    cls = None
    if gold_labels:
        cls = classification_metrics(gold_labels, predicted).to_dict()

    return EvalReport(
        setting=setting,
        n_questions=len(qa),
        recall_at_k=recall,
        map_score=map_score,
        classification_metrics=cls,
        latency_stats={stage: _latency(v) for stage, v in timings.items()},
        per_question=records,
        excluded_from_map=excluded,
        excluded_from_recall=excluded_recall,
        failed=failed,
        k=cfg.k,
        backend=backend.name,
    )


def expand_settings(pipelines: Sequence[Pipeline], conditions: Sequence[MemoryCondition]) -> list[AblationSetting]:
    return [AblationSetting(p, c) for p in pipelines for c in conditions]


# --------------------------------------------------------------------------
# LLM judge (optional, needs a remote backend)

JUDGE_PROMPT = (
    "Rate the response to the question against the reference answer.\n"
    "Give two integers from 0 to 10: correctness (does it state the same facts "
    "as the reference) and coherence (is it fluent and consistent).\n"
    'Reply with JSON only, e.g. {{"correctness": 7, "coherence": 9}}.\n\n'
    "Question: {question}\nReference answer: {gold}\nResponse: {response}\n"
)


@dataclass(frozen=True)
class JudgeScore:
    correctness: float | None
    coherence: float | None
    raw: str

    @property
    def missing(self) -> bool:
        return self.correctness is None or self.coherence is None


def parse_judge_output(raw: str) -> tuple[float | None, float | None]:
    """Pull 0-10 correctness/coherence scores out of a judge reply and scale to [0, 1]."""
    values: dict[str, float] = {}
    m = re.search(r"\{.*?\}", raw, re.S)
    if m:
        try:
            obj = json.loads(m.group(0))
            for key in ("correctness", "coherence"):
                if isinstance(obj.get(key), (int, float)):
                    values[key] = float(obj[key])
        except json.JSONDecodeError:
            pass
    for key in ("correctness", "coherence"):
        if key not in values:
            hit = re.search(rf"{key}\W{{0,3}}(\d+(?:\.\d+)?)", raw, re.I)
            if hit:
                values[key] = float(hit.group(1))
    out = []
    for key in ("correctness", "coherence"):
        v = values.get(key)
        out.append(v / 10.0 if v is not None and 0.0 <= v <= 10.0 else None)
    return out[0], out[1]


def judge_adapter(
    question: str,
    response: str,
    gold_answer: str,
    backend: GenerationBackend,
    params: GenerationParams = GenerationParams(),
) -> JudgeScore:
    prompt = JUDGE_PROMPT.format(question=question, gold=gold_answer, response=response)
    raw = generate(backend, prompt, params).text
    c, h = parse_judge_output(raw)
    if c is None or h is None:
        log.warning("unparsable judge output: %r", raw[:200])
    return JudgeScore(c, h, raw)
