"""Memory database model, ingestion, segmentation and reference alignment."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator

import jsonschema

from .text import analyze, normalize

log = logging.getLogger(__name__)


class MemType(str, Enum):
    SEMANTIC = "semantic"
    EPISODIC = "episodic"


class Subtype(str, Enum):
    PRO = "PRO"
    SR = "SR"
    EVT = "EVT"
    DLG = "DLG"

    @property
    def mem_type(self) -> MemType:
        if self in (Subtype.PRO, Subtype.SR):
            return MemType.SEMANTIC
        return MemType.EPISODIC


class SchemaError(ValueError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class DuplicateCharacter(ValueError):
    def __init__(self, character_id: str):
        super().__init__(f"duplicate character_id {character_id!r}")
        self.character_id = character_id


@dataclass(frozen=True)
class Relationship:
    peer_name: str
    category: str
    description: str


@dataclass(frozen=True)
class Event:
    event_id: str
    narrative: str
    topic: str = ""


@dataclass(frozen=True)
class Turn:
    speaker: str
    utterance: str


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    turns: tuple[Turn, ...]
    event_id: str | None = None


@dataclass(frozen=True)
class CharacterMemory:
    character_id: str
    profile: dict[str, str] = field(default_factory=dict)
    relationships: tuple[Relationship, ...] = ()
    events: tuple[Event, ...] = ()
    dialogues: tuple[Dialogue, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "character_id": self.character_id,
            "profile": dict(self.profile),
            "relationships": [asdict(r) for r in self.relationships],
            "events": [
                {"event_id": e.event_id, "topic": e.topic, "narrative": e.narrative}
                for e in self.events
            ],
            "dialogues": [
                {
                    "dialogue_id": d.dialogue_id,
                    "event_id": d.event_id,
                    "turns": [asdict(t) for t in d.turns],
                }
                for d in self.dialogues
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> CharacterMemory:
        return cls(
            character_id=obj["character_id"],
            profile=dict(obj.get("profile", {})),
            relationships=tuple(Relationship(**r) for r in obj.get("relationships", [])),
            events=tuple(
                Event(event_id=e["event_id"], narrative=e["narrative"], topic=e.get("topic", ""))
                for e in obj.get("events", [])
            ),
            dialogues=tuple(
                Dialogue(
                    dialogue_id=d["dialogue_id"],
                    turns=tuple(Turn(**t) for t in d["turns"]),
                    event_id=d.get("event_id"),
                )
                for d in obj.get("dialogues", [])
            ),
        )


@dataclass(frozen=True)
class DatabaseCounts:
    characters: int
    profiles: int
    relationships: int
    events: int
    dialogues: int
    utterances: int


@dataclass(frozen=True)
class MemoryDatabase:
    characters: dict[str, CharacterMemory]

    def __len__(self) -> int:
        return len(self.characters)

    def __iter__(self) -> Iterator[CharacterMemory]:
        return iter(self.characters.values())

    def __contains__(self, character_id: object) -> bool:
        return character_id in self.characters

    def __getitem__(self, character_id: str) -> CharacterMemory:
        return self.characters[character_id]

    @property
    def relationship_categories(self) -> set[str]:
        return {r.category for c in self for r in c.relationships}

    def counts(self) -> DatabaseCounts:
        chars = list(self)
        return DatabaseCounts(
            characters=len(chars),
            profiles=sum(1 for c in chars if any(v.strip() for v in c.profile.values())),
            relationships=sum(len(c.relationships) for c in chars),
            events=sum(len(c.events) for c in chars),
            dialogues=sum(len(c.dialogues) for c in chars),
            utterances=sum(len(d.turns) for c in chars for d in c.dialogues),
        )


@dataclass(frozen=True)
class MemoryItem:
    item_id: str
    character_id: str
    mem_type: MemType
    subtype: Subtype
    text: str
    provenance: str

    def to_dict(self) -> dict[str, str]:
        return {
            "item_id": self.item_id,
            "character_id": self.character_id,
            "mem_type": self.mem_type.value,
            "subtype": self.subtype.value,
            "text": self.text,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, str]) -> MemoryItem:
        return cls(
            item_id=obj["item_id"],
            character_id=obj["character_id"],
            mem_type=MemType(obj["mem_type"]),
            subtype=Subtype(obj["subtype"]),
            text=obj["text"],
            provenance=obj["provenance"],
        )


@dataclass(frozen=True)
class Anchor:
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class QAItem:
    qa_id: str
    character_id: str
    question: str
    answer: str
    reference_memory_texts: tuple[str, ...] = ()
    reference_item_ids: tuple[str, ...] = ()
    anchors: tuple[Anchor, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "qa_id": self.qa_id,
            "character_id": self.character_id,
            "question": self.question,
            "answer": self.answer,
            "reference_memory_texts": list(self.reference_memory_texts),
            "reference_item_ids": list(self.reference_item_ids),
            "anchors": [asdict(a) for a in self.anchors],
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> QAItem:
        return cls(
            qa_id=obj["qa_id"],
            character_id=obj["character_id"],
            question=obj["question"],
            answer=obj["answer"],
            reference_memory_texts=tuple(obj.get("reference_memory_texts", [])),
            reference_item_ids=tuple(obj.get("reference_item_ids", [])),
            anchors=tuple(Anchor(**a) for a in obj.get("anchors", [])),
        )


# --------------------------------------------------------------------------
# Reading and validation


@lru_cache(maxsize=None)
def _validator(name: str) -> jsonschema.Draft202012Validator:
    schema = json.loads(resources.files("memq.data").joinpath(name).read_text("utf-8"))
    return jsonschema.Draft202012Validator(schema)


def schema_text(name: str = "corpus.schema.json") -> str:
    return resources.files("memq.data").joinpath(name).read_text("utf-8")


def iter_json_objects(text: str) -> Iterator[Any]:
    """Yield top-level JSON values from a JSON array, JSON Lines, or
    concatenated objects. A top-level array is flattened."""
    decoder = json.JSONDecoder()
    pos, n = 0, len(text)
    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            return
        try:
            value, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"$@{exc.pos}", exc.msg) from None
        if isinstance(value, list):
            yield from value
        else:
            yield value


def _read_source(source: str | Path | Iterable[Any]) -> Iterable[Any]:
    if isinstance(source, (str, Path)):
        return iter_json_objects(Path(source).read_text(encoding="utf-8"))
    return source


def _check(obj: Any, schema: str, where: str) -> None:
    errors = sorted(_validator(schema).iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = where + "".join(f"[{p!r}]" if isinstance(p, str) else f"[{p}]" for p in err.absolute_path)
        raise SchemaError(path, err.message)


def ingest_database(
    records: str | Path | Iterable[dict[str, Any]],
    categories: set[str] | None = None,
) -> MemoryDatabase:
    """Validate character records and build a :class:`MemoryDatabase`.

    ``records`` is a path to a corpus file or an iterable of parsed objects.
    When ``categories`` is given, relationship categories must come from it.
    """
    chars: dict[str, CharacterMemory] = {}
    for i, obj in enumerate(_read_source(records)):
        where = f"$[{i}]"
        _check(obj, "corpus.schema.json", where)
        cm = CharacterMemory.from_dict(obj)
        if cm.character_id in chars:
            raise DuplicateCharacter(cm.character_id)
        event_ids = {e.event_id for e in cm.events}
        if len(event_ids) != len(cm.events):
            raise SchemaError(f"{where}['events']", "duplicate event_id")
        for j, d in enumerate(cm.dialogues):
            if d.event_id is not None and d.event_id not in event_ids:
                raise SchemaError(
                    f"{where}['dialogues'][{j}]['event_id']",
                    f"unknown event {d.event_id!r}",
                )
        if categories is not None:
            for j, r in enumerate(cm.relationships):
                if r.category not in categories:
                    raise SchemaError(
                        f"{where}['relationships'][{j}]['category']",
                        f"category {r.category!r} not in vocabulary",
                    )
        chars[cm.character_id] = cm
    db = MemoryDatabase(chars)
    c = db.counts()
    log.info(
        "ingested %d characters: %d profiles, %d relationships, %d events, %d dialogues",
        c.characters, c.profiles, c.relationships, c.events, c.dialogues,
    )
    return db


def serialize_database(db: MemoryDatabase) -> str:
    """Canonical JSON Lines form of a database."""
    return "".join(
        json.dumps(c.to_dict(), ensure_ascii=False, separators=(",", ":")) + "\n" for c in db
    )


def validate_anchor_spans(qa: QAItem) -> list[int]:
    """Indexes of anchors whose span does not reproduce the anchor text."""
    return [
        i
        for i, a in enumerate(qa.anchors)
        if not (0 <= a.start <= a.end <= len(qa.answer)) or qa.answer[a.start : a.end] != a.text
    ]


def load_qa(source: str | Path | Iterable[dict[str, Any]]) -> list[QAItem]:
    out: list[QAItem] = []
    seen: set[str] = set()
    for i, obj in enumerate(_read_source(source)):
        where = f"$[{i}]"
        _check(obj, "qa.schema.json", where)
        qa = QAItem.from_dict(obj)
        if qa.qa_id in seen:
            raise SchemaError(f"{where}['qa_id']", f"duplicate qa_id {qa.qa_id!r}")
        seen.add(qa.qa_id)
        bad = validate_anchor_spans(qa)
        if bad:
            raise SchemaError(f"{where}['anchors'][{bad[0]}]", "span does not match answer text")
        out.append(qa)
    return out


def dump_qa(qa: Iterable[QAItem]) -> str:
    return json.dumps([q.to_dict() for q in qa], ensure_ascii=False, indent=1) + "\n"


# --------------------------------------------------------------------------
# Segmentation


def make_item_id(character_id: str, subtype: Subtype, provenance: str) -> str:
    key = "\x1f".join((character_id, subtype.value, provenance)).encode("utf-8")
    return hashlib.sha256(key).hexdigest()[:16]


def _item(cid: str, subtype: Subtype, provenance: str, raw: str) -> MemoryItem | None:
    text = normalize(raw)
    if not text:
        return None
    return MemoryItem(
        item_id=make_item_id(cid, subtype, provenance),
        character_id=cid,
        mem_type=subtype.mem_type,
        subtype=subtype,
        text=text,
        provenance=provenance,
    )


def segment_character(cm: CharacterMemory) -> list[MemoryItem]:
    cid = cm.character_id
    raw: list[MemoryItem | None] = []
    for attr, value in cm.profile.items():
        if value.strip():
            raw.append(_item(cid, Subtype.PRO, f"profile/{attr}", f"{cid}的{attr}: {value}"))
    for i, r in enumerate(cm.relationships):
        raw.append(_item(cid, Subtype.SR, f"relationship/{i}", r.description))
    for e in cm.events:
        raw.append(_item(cid, Subtype.EVT, f"event/{e.event_id}", e.narrative))
    for d in cm.dialogues:
        for t, turn in enumerate(d.turns):
            if turn.utterance.strip():
                raw.append(
                    _item(cid, Subtype.DLG, f"dialogue/{d.dialogue_id}/{t}", f"{turn.speaker}: {turn.utterance}")
                )
    return [it for it in raw if it is not None]


def segment_memories(db: MemoryDatabase) -> list[MemoryItem]:
    """One item per profile attribute, relationship, event and dialogue turn."""
    return [it for cm in db for it in segment_character(cm)]


def items_by_character(items: Iterable[MemoryItem]) -> dict[str, list[MemoryItem]]:
    out: dict[str, list[MemoryItem]] = {}
    for it in items:
        out.setdefault(it.character_id, []).append(it)
    return out


def dump_items(items: Iterable[MemoryItem]) -> str:
    return "".join(json.dumps(it.to_dict(), ensure_ascii=False, separators=(",", ":")) + "\n" for it in items)


def load_items(path: str | Path) -> list[MemoryItem]:
    return [MemoryItem.from_dict(o) for o in iter_json_objects(Path(path).read_text(encoding="utf-8"))]


# --------------------------------------------------------------------------
# Reference alignment

OVERLAP_THRESHOLD = 0.8


@dataclass(frozen=True)
class UnalignedReference:
    qa_id: str
    reference_text: str
    best_overlap: float


def token_overlap(reference: str, candidate: str) -> float:
    """Share of the reference's distinct tokens that also occur in the candidate."""
    ref = set(analyze(reference))
    if not ref:
        return 0.0
    return len(ref & set(analyze(candidate))) / len(ref)


def align_references(
    qa: list[QAItem],
    items: list[MemoryItem],
    threshold: float = OVERLAP_THRESHOLD,
) -> tuple[list[QAItem], list[UnalignedReference]]:
    """Resolve each QA item's reference texts to item ids of its character.

    Exact match on normalized text first; otherwise the same-character item
    with the highest token overlap, if that overlap reaches ``threshold``.
    Unresolvable references are returned alongside, never raised.
    """
    by_char = items_by_character(items)
    exact: dict[tuple[str, str], str] = {}
    for it in items:
        exact.setdefault((it.character_id, it.text), it.item_id)

    aligned: list[QAItem] = []
    flagged: list[UnalignedReference] = []
    for q in qa:
        if not q.reference_memory_texts:
            aligned.append(q)
            continue
        ids: list[str] = []
        for ref in q.reference_memory_texts:
            hit = exact.get((q.character_id, normalize(ref)))
            if hit is None:
                best, best_id = 0.0, None
                for it in by_char.get(q.character_id, []):
                    ov = token_overlap(ref, it.text)
                    if ov > best:
                        best, best_id = ov, it.item_id
                if best_id is not None and best >= threshold:
                    hit = best_id
                else:
                    flagged.append(UnalignedReference(q.qa_id, ref, best))
            if hit is not None and hit not in ids:
                ids.append(hit)
        aligned.append(replace(q, reference_item_ids=tuple(ids)))
    return aligned, flagged
