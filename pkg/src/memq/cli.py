"""``memq`` command line.

Exit codes: 0 ok, 2 configuration error, 3 missing artifact or unknown
character, 4 generation backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import __version__
from .classifier import ClassifierModel, UniformClassifier, evaluate_classifier, read_labeled, train
from .evaluation import (
    AblationSetting,
    EvalConfig,
    MemoryCondition,
    Pipeline,
    expand_settings,
    run_ablation,
)
from .published import import_published
from .rerank import RerankConfig, rerank
from .reporting import RunDirExists, render_aligned, table_rows, write_run
from .retriever import IndexStore, retrieve, retrieve_per_type, write_index_dir
from .store import (
    DuplicateCharacter,
    SchemaError,
    align_references,
    ingest_database,
    load_qa,
    segment_memories,
)
from .synthesis import (
    ANSWER_TEMPLATE_V1,
    ChatCompletionsBackend,
    GenerationError,
    GenerationParams,
    GenerationRequest,
    MockExtractiveBackend,
    RecordingBackend,
    ReplayBackend,
    build_prompt,
    generate,
)
from .synthetic import GenSpec, generate_corpus, write_corpus

log = logging.getLogger("memq")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_BACKEND = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _missing(msg: str) -> CliError:
    return CliError(EXIT_MISSING, msg)


def _config(msg: str) -> CliError:
    return CliError(EXIT_CONFIG, msg)


# --------------------------------------------------------------------------
# Run configuration


@dataclass
class BackendConfig:
    name: str = "mock"
    base_url: str = ""
    model: str = ""
    timeout_ms: int = 30000
    max_tokens: int = 256
    temperature: float = 0.0
    retries: int = 3
    max_calls: int | None = None
    max_in_flight: int = 4
    record_dir: str | None = None
    replay_dir: str | None = None


@dataclass
class RunConfig:
    corpus: str | None = None
    qa: str | None = None
    index: str | None = None
    model: str | None = None
    run_dir: str | None = None
    rerank: dict[str, Any] = field(default_factory=lambda: {"alpha": 0.5, "beta": 0.5, "k": 3})
    backend: BackendConfig = field(default_factory=BackendConfig)
    setting: str = "w-mc+r"
    condition: str = "retrieved"
    seed: int = 0
    normalize_scores: bool = False
    classify_memories: bool = False

    def rerank_config(self) -> RerankConfig:
        try:
            return RerankConfig(
                float(self.rerank.get("alpha", 0.5)),
                float(self.rerank.get("beta", 0.5)),
                int(self.rerank.get("k", 3)),
                self.normalize_scores,
            )
        except (TypeError, ValueError) as exc:
            raise _config(f"bad rerank config: {exc}") from None

    def params(self) -> GenerationParams:
        b = self.backend
        return GenerationParams(b.max_tokens, b.temperature, b.timeout_ms / 1000.0, b.retries)

    def to_dict(self) -> dict:
        return asdict(self)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise _config(f"cannot read config {args.config}: {exc}") from None
        paths = raw.pop("paths", {})
        backend = raw.pop("backend", {})
        for key, value in {**paths, **raw}.items():
            if key == "rerank":
                cfg.rerank.update(value)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise _config(f"unknown config key {key!r}")
        for key, value in backend.items():
            if not hasattr(cfg.backend, key):
                raise _config(f"unknown backend key {key!r}")
            setattr(cfg.backend, key, value)

    for key in ("corpus", "qa", "index", "model", "run_dir", "setting", "condition", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    for key, attr in (("alpha", "alpha"), ("beta", "beta"), ("k", "k")):
        value = getattr(args, key, None)
        if value is not None:
            cfg.rerank[attr] = value
    for key in ("base_url", "model_name", "max_calls", "record_dir", "replay_dir", "timeout_ms"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg.backend, "model" if key == "model_name" else key, value)
    if getattr(args, "backend", None):
        cfg.backend.name = args.backend
    if getattr(args, "normalize_scores", False):
        cfg.normalize_scores = True
    if getattr(args, "classify_memories", False):
        cfg.classify_memories = True
    cfg.rerank_config()
    if cfg.backend.name not in ("mock", "chat", "replay"):
        raise _config(f"unknown backend {cfg.backend.name!r}")
    return cfg


def make_backend(cfg: RunConfig):
    b = cfg.backend
    if b.name == "mock":
        backend = MockExtractiveBackend()
    elif b.name == "chat":
        if not b.base_url or not b.model:
            raise _config("chat backend needs --base-url and --model-name")
        backend = ChatCompletionsBackend(b.base_url, b.model, max_calls=b.max_calls)
    else:
        if not b.replay_dir:
            raise _config("replay backend needs --replay-dir")
        if not Path(b.replay_dir).is_dir():
            raise _missing(f"replay directory {b.replay_dir} not found")
        backend = ReplayBackend(b.replay_dir, f"chat:{b.model}")
    if b.record_dir:
        backend = RecordingBackend(backend, b.record_dir)
    return backend


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise _config(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise _missing(f"{what} not found: {path}")
    return p


def _load_store(cfg: RunConfig) -> IndexStore:
    p = _need(cfg.index, "index")
    if not (p / "manifest.json").exists():
        raise _missing(f"{p} is not an index directory (no manifest.json)")
    return IndexStore.load(p)


def _load_classifier(cfg: RunConfig, no_classify: bool = False):
    if no_classify:
        return UniformClassifier()
    p = _need(cfg.model, "model")
    try:
        return ClassifierModel.load(p)
    except (ValueError, KeyError) as exc:
        raise _config(f"bad model file {p}: {exc}") from None


def _emit(args, obj: Any, text: str) -> None:
    if getattr(args, "format", "text") == "json":
        print(json.dumps(obj, ensure_ascii=False, indent=1, sort_keys=True))
    else:
        print(text, end="" if text.endswith("\n") else "\n")


# --------------------------------------------------------------------------
# Commands


def cmd_gen(args) -> int:
    spec = GenSpec(
        seed=args.seed,
        n_characters=args.chars,
        relationships_per_char=args.relationships,
        events_per_char=args.events,
        dialogues_per_event=args.dialogues_per_event,
        turns_per_dialogue=args.turns,
        qa_per_char=args.qa_per_char,
        anchor_per_qa=args.anchors,
    )
    corpus = generate_corpus(spec)
    paths = write_corpus(args.out, corpus, args.seed)
    c = corpus.db.counts()
    _emit(
        args,
        {"counts": asdict(c), "qa": len(corpus.qa), "files": {k: str(v) for k, v in paths.items()}},
        f"{c.characters} characters, {c.events} events, {c.dialogues} dialogues, {len(corpus.qa)} QA items -> {args.out}",
    )
    return 0


def cmd_import(args) -> int:
    paths = import_published(_need(args.memory, "memory"), args.qa and _need(args.qa, "qa"), args.out)
    db = ingest_database(paths["corpus"])
    _emit(
        args,
        {"counts": asdict(db.counts()), "files": {k: str(v) for k, v in paths.items()}},
        f"imported {len(db)} characters -> {args.out}",
    )
    return 0


def cmd_ingest(args) -> int:
    db = ingest_database(_need(args.corpus, "corpus"))
    c = db.counts()
    out: dict[str, Any] = {"counts": asdict(c)}
    lines = [
        f"characters     {c.characters}",
        f"profiles       {c.profiles}",
        f"relationships  {c.relationships}",
        f"events         {c.events}",
        f"dialogues      {c.dialogues}",
        f"utterances     {c.utterances}",
    ]
    items = segment_memories(db)
    out["items"] = len(items)
    lines.append(f"memory items   {len(items)}")
    if args.qa:
        qa, flagged = align_references(load_qa(_need(args.qa, "qa")), items)
        out["qa"] = len(qa)
        out["unaligned"] = [asdict(f) for f in flagged]
        lines.append(f"qa items       {len(qa)}")
        lines.append(f"unaligned refs {len(flagged)}")
        lines += [f"  {f.qa_id}: overlap {f.best_overlap:.2f}" for f in flagged[:20]]
    _emit(args, out, "\n".join(lines))
    return 0


def cmd_index_build(args) -> int:
    db = ingest_database(_need(args.corpus, "corpus"))
    items = segment_memories(db)
    t0 = time.perf_counter()
    indexes = write_index_dir(args.out, items)
    dt = time.perf_counter() - t0
    _emit(
        args,
        {"characters": len(indexes), "items": len(items), "seconds": dt},
        f"indexed {len(items)} items for {len(indexes)} characters in {dt:.2f}s -> {args.out}",
    )
    return 0


def _index_for(store: IndexStore, character: str):
    if character not in store.indexes:
        raise _missing(f"unknown character {character!r}")
    return store.indexes[character]


def cmd_index_query(args) -> int:
    cfg = load_run_config(args)
    store = _load_store(cfg)
    index = _index_for(store, args.character)
    k = int(cfg.rerank["k"])
    hits = retrieve_per_type(index, args.question, k) if args.per_type else retrieve(index, args.question, k)
    rows = [c.to_dict() | {"text": store.by_id[c.item_id].text} for c in hits]
    text = "\n".join(f"{c['raw_score']:8.4f}  {c['mem_type'][:3]}  {c['item_id']}  {c['text']}" for c in rows)
    _emit(args, rows, text)
    return 0


def cmd_classifier_train(args) -> int:
    data = read_labeled(_need(args.data, "data"))
    model = train(data, smoothing=args.smoothing)
    model.save(args.out)
    _emit(
        args,
        {"examples": len(data), "vocabulary": len(model.vocabulary)},
        f"trained on {len(data)} questions, vocabulary {len(model.vocabulary)} -> {args.out}",
    )
    return 0


def cmd_classifier_eval(args) -> int:
    cfg = load_run_config(args)
    model = _load_classifier(cfg)
    data = read_labeled(_need(args.data, "data"))
    rep = evaluate_classifier(model, data)
    text = (
        f"n={rep.n}  precision={rep.precision:.4f}  recall={rep.recall:.4f}  "
        f"f1={rep.f1:.4f}  accuracy={rep.accuracy:.4f}\n"
        + "".join(
            f"  {name:9s} P={m.precision:.4f} R={m.recall:.4f} F1={m.f1:.4f} support={m.support}\n"
            for name, m in rep.per_class.items()
        )
    )
    _emit(args, rep.to_dict(), text)
    return 0


def _ranked(store, index, question, cfg: RunConfig, classifier):
    dist = classifier.classify(question)
    rcfg = cfg.rerank_config()
    pool = retrieve_per_type(index, question, rcfg.k)
    mem_dists = None
    if cfg.classify_memories and not isinstance(classifier, UniformClassifier):
        mem_dists = {c.item_id: classifier.classify(store.by_id[c.item_id].text) for c in pool}
    full = rerank(pool, dist, RerankConfig(rcfg.alpha, rcfg.beta, len(pool), rcfg.normalize_scores), mem_dists)
    return dist, pool, full, full[: rcfg.k]


def cmd_retrieve(args) -> int:
    cfg = load_run_config(args)
    store = _load_store(cfg)
    index = _index_for(store, args.character)
    classifier = _load_classifier(cfg, args.no_classify)
    dist, _, _, top = _ranked(store, index, args.question, cfg, classifier)
    rows = [c.to_dict() | {"text": store.by_id[c.item_id].text} for c in top]
    text = f"p(semantic)={dist.p_semantic:.4f} p(episodic)={dist.p_episodic:.4f}\n" + "\n".join(
        f"{r['composite_score']:.4f}  {r['raw_score']:8.4f}  {r['mem_type'][:3]}  {r['text']}" for r in rows
    )
    _emit(args, {"distribution": asdict(dist), "top": rows}, text)
    return 0


def cmd_answer(args) -> int:
    cfg = load_run_config(args)
    backend = make_backend(cfg)
    store = _load_store(cfg)
    index = _index_for(store, args.character)
    classifier = _load_classifier(cfg, args.no_classify)
    dist, pool, full, top = _ranked(store, index, args.question, cfg, classifier)
    memories = [store.by_id[c.item_id] for c in top]
    prompt = build_prompt(ANSWER_TEMPLATE_V1, args.question, memories)
    try:
        result = generate(backend, GenerationRequest(prompt, args.question, tuple(memories)), cfg.params())
    except GenerationError as exc:
        raise CliError(EXIT_BACKEND, f"generation failed: {exc}") from None
    composite = {c.item_id: c.composite_score for c in full}
    obj = {
        "distribution": asdict(dist),
        "predicted_type": dist.label.value,
        "pool": [c.to_dict() | {"composite_score": composite[c.item_id]} for c in pool],
        "top": [c.to_dict() | {"text": store.by_id[c.item_id].text} for c in top],
        "answer": result.text,
    }
    if args.verbose:
        obj["prompt"] = prompt
    lines = [
        f"classification: semantic={dist.p_semantic:.4f} episodic={dist.p_episodic:.4f} -> {dist.label.value}",
        f"candidate pool ({len(pool)}):",
    ]
    lines += [
        f"  {c.mem_type.value[:3]}  raw={c.raw_score:8.4f}  composite={composite[c.item_id]:.4f}  {c.item_id}"
        for c in pool
    ]
    lines.append(f"top {len(top)}:")
    lines += [f"  {i}. [{store.by_id[c.item_id].subtype.value}] {store.by_id[c.item_id].text}" for i, c in enumerate(top, 1)]
    if args.verbose:
        lines += ["prompt:", prompt]
    lines += ["answer:", result.text]
    _emit(args, obj, "\n".join(lines))
    return 0


def _settings(setting: str, condition: str) -> list[AblationSetting]:
    try:
        pipelines = list(Pipeline) if setting == "all" else [Pipeline(setting)]
        conditions = list(MemoryCondition) if condition == "all" else [MemoryCondition(condition)]
    except ValueError as exc:
        raise _config(str(exc)) from None
    return expand_settings(pipelines, conditions)


def _ablation_grid() -> list[AblationSetting]:
    grid = [AblationSetting(p, MemoryCondition.RETRIEVED) for p in Pipeline]
    grid += [AblationSetting(Pipeline.WO_MC_W_R, c) for c in (MemoryCondition.NR, MemoryCondition.IR, MemoryCondition.CR)]
    return grid


def _run_eval(args, settings: list[AblationSetting]) -> int:
    cfg = load_run_config(args)
    backend = make_backend(cfg)
    store = _load_store(cfg)
    qa_path = _need(cfg.qa, "qa")
    qa, flagged = align_references(load_qa(qa_path), store.items)
    unknown = sorted({q.character_id for q in qa} - set(store.indexes))
    if unknown:
        raise _missing(f"unknown character {unknown[0]!r} in {qa_path}")
    needs_model = any(
        s.pipeline == Pipeline.W_MC_R and s.effective_condition == MemoryCondition.RETRIEVED for s in settings
    )
    classifier = _load_classifier(cfg, getattr(args, "no_classify", False)) if needs_model else None
    ecfg = EvalConfig(
        rerank=cfg.rerank_config(),
        params=cfg.params(),
        seed=cfg.seed,
        max_in_flight=cfg.backend.max_in_flight,
        classify_memories=cfg.classify_memories,
    )
    reports = [run_ablation(store, qa, s, backend, ecfg, classifier) for s in settings]

    run_dir = cfg.run_dir or f"runs/run-{time.strftime('%Y%m%d-%H%M%S')}"
    report_cfg = cfg.to_dict()
    report_cfg.pop("run_dir")
    report_cfg["settings"] = [s.label for s in settings]
    report_cfg["unaligned_references"] = [f.qa_id for f in flagged]
    artifacts = {"qa": qa_path, "index": cfg.index}
    if cfg.model and needs_model and Path(cfg.model).exists():
        artifacts["model"] = cfg.model
    try:
        paths = write_run(run_dir, reports, report_cfg, artifacts, with_refs=args.paper_refs, figures=not args.no_figures)
    except RunDirExists as exc:
        raise _config(str(exc)) from None
    (Path(run_dir) / "config.json").write_text(
        json.dumps(cfg.to_dict(), ensure_ascii=False, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )

    ks = sorted({k for r in reports for k in r.recall_at_k}) or [1, 2, 3, 5]
    rows = table_rows(reports, ks, args.paper_refs)
    _emit(
        args,
        {"run_dir": str(run_dir), "reports": [r.to_dict() for r in reports]},
        render_aligned(rows) + f"run directory: {run_dir}\n",
    )
    if any(r.failed for r in reports):
        n = sum(len(r.failed) for r in reports)
        print(f"memq: {n} generations failed; see {paths['report']}", file=sys.stderr)
        return EXIT_BACKEND
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    return _run_eval(args, _settings(cfg.setting, cfg.condition))


def cmd_ablate(args) -> int:
    return _run_eval(args, _ablation_grid())


# --------------------------------------------------------------------------
# Parser


def _common(p: argparse.ArgumentParser, *, artifacts: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--format", choices=("text", "json"), default="text")
    if artifacts:
        p.add_argument("--index", help="index directory from 'memq index build'")
        p.add_argument("--model", help="classifier model file")


def _rerank_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="memories kept after re-ranking (default 3)")
    p.add_argument("--alpha", type=float, help="weight of the classification term (default 0.5)")
    p.add_argument("--beta", type=float, help="weight of the retrieval term (default 0.5)")
    p.add_argument("--normalize-scores", action="store_true", help="min-max raw scores instead of sigmoid")
    p.add_argument("--classify-memories", action="store_true",
                   help="score candidates by classifying the memory text instead of the question")


def _backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("mock", "chat", "replay"))
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model-name", dest="model_name", help="remote model id")
    p.add_argument("--timeout-ms", dest="timeout_ms", type=int)
    p.add_argument("--max-calls", dest="max_calls", type=int, help="hard cap on remote calls")
    p.add_argument("--record-dir", dest="record_dir", help="store transcripts here")
    p.add_argument("--replay-dir", dest="replay_dir", help="serve recorded transcripts from here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"memq {__version__}")
    ap.add_argument("-v", "--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--chars", type=int, default=20)
    p.add_argument("--relationships", type=int, default=9)
    p.add_argument("--events", type=int, default=10)
    p.add_argument("--dialogues-per-event", type=int, default=1)
    p.add_argument("--turns", type=int, default=4)
    p.add_argument("--qa-per-char", type=int, default=20)
    p.add_argument("--anchors", type=int, default=3)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("import", help="convert the published dataset files to the canonical layout")
    p.add_argument("--memory", required=True, help="published memory JSON")
    p.add_argument("--qa", help="published QA JSON")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("ingest", help="validate a corpus (and QA file) and print counts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--qa")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build or query BM25 indexes")
    isub = p.add_subparsers(dest="index_command", required=True)
    q = isub.add_parser("build")
    q.add_argument("--corpus", required=True)
    q.add_argument("-o", "--out", required=True)
    q.add_argument("--format", choices=("text", "json"), default="text")
    q.set_defaults(func=cmd_index_build)
    q = isub.add_parser("query")
    _common(q)
    q.add_argument("--character", required=True)
    q.add_argument("--k", type=int)
    q.add_argument("--per-type", action="store_true", help="return the k-per-type candidate pool")
    q.add_argument("question")
    q.set_defaults(func=cmd_index_query)

    p = sub.add_parser("classifier", help="train or evaluate the question classifier")
    csub = p.add_subparsers(dest="classifier_command", required=True)
    q = csub.add_parser("train")
    q.add_argument("--data", required=True, help="label<TAB>question lines")
    q.add_argument("--smoothing", type=float, default=1.0)
    q.add_argument("-o", "--out", required=True)
    q.add_argument("--format", choices=("text", "json"), default="text")
    q.set_defaults(func=cmd_classifier_train)
    q = csub.add_parser("eval")
    _common(q, artifacts=False)
    q.add_argument("--model")
    q.add_argument("--data", required=True)
    q.set_defaults(func=cmd_classifier_eval)

    p = sub.add_parser("retrieve", help="classify, retrieve and re-rank for one question")
    _common(p)
    _rerank_flags(p)
    p.add_argument("--character", required=True)
    p.add_argument("--no-classify", action="store_true", help="use a uniform class distribution")
    p.add_argument("question")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("answer", help="answer one question end to end")
    _common(p)
    _rerank_flags(p)
    _backend_flags(p)
    p.add_argument("--character", required=True)
    p.add_argument("--no-classify", action="store_true")
    p.add_argument("--verbose", action="store_true", help="also print the rendered prompt")
    p.add_argument("question")
    p.set_defaults(func=cmd_answer)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate one setting (or --setting all)"),
        ("ablate", cmd_ablate, "run the full pipeline x memory-condition grid"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _rerank_flags(p)
        _backend_flags(p)
        p.add_argument("--qa")
        p.add_argument("--run-dir", dest="run_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--paper-refs", action="store_true", help="add published reference columns")
        p.add_argument("--no-figures", action="store_true")
        p.add_argument("--no-classify", action="store_true")
        if name == "eval":
            p.add_argument("--setting", choices=[x.value for x in Pipeline] + ["all"])
            p.add_argument("--condition", choices=[x.value for x in MemoryCondition] + ["all"])
        p.set_defaults(func=func)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"memq: {exc}", file=sys.stderr)
        return exc.code
    except (SchemaError, DuplicateCharacter) as exc:
        print(f"memq: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
