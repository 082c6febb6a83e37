"""Import adapter for the published dataset's JSON layout.

The published files are keyed by character name. Memory file::

    {name: {"profile": {attr: value},
            "social_relationship": {peer: {"relationship": .., "description": ..}},
            "events": {event_id: {"content": .., "topic"?: ..}},
            "dialogues": {dialogue_id: {"event_id"?: .., "contents": [..]}}}}

QA file::

    {name: [{"Question": .., "Answer": .., "Reference Memory": ..,
             "Memory Anchors": {anchor_text: [start, end]} | [..]}, ...]}

Key matching ignores case, spaces, underscores and hyphens, and a few
aliases are accepted, because releases differ in spelling. Anything the
adapter cannot place raises :class:`~memq.store.SchemaError`.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any

from .store import SchemaError

_ALIASES = {
    "profile": ("profile", "profiles"),
    "relationships": ("socialrelationship", "socialrelationships", "relationships", "relationship"),
    "events": ("events", "event"),
    "dialogues": ("dialogues", "dialogue", "dialogs", "dialog"),
    "narrative": ("content", "contents", "narrative", "summary", "text", "description"),
    "topic": ("topic", "theme"),
    "category": ("relationship", "relation", "category", "type"),
    "description": ("description", "content", "text"),
    "turns": ("contents", "content", "turns", "utterances", "dialogue", "dialog"),
    "event_id": ("eventid", "event"),
    "question": ("question", "q"),
    "answer": ("answer", "a"),
    "reference": ("referencememory", "reference", "referencememories", "memory"),
    "anchors": ("memoryanchors", "anchors", "memoryanchor"),
}


def _key(s: str) -> str:
    return re.sub(r"[\s_\-]", "", s).lower()


def _get(obj: dict, field: str, default: Any = None) -> Any:
    keyed = {_key(k): v for k, v in obj.items()}
    for alias in _ALIASES[field]:
        if alias in keyed:
            return keyed[alias]
    return default


def _entries(value: Any, id_field: str) -> list[tuple[str, Any]]:
    """Normalize a mapping {id: obj} or a list [obj] into (id, obj) pairs."""
    if value is None:
        return []
    if isinstance(value, dict):
        return [(str(k), v) for k, v in value.items()]
    if isinstance(value, list):
        return [(str(v.get(id_field, i)) if isinstance(v, dict) else str(i), v) for i, v in enumerate(value)]
    raise SchemaError(id_field, f"expected mapping or list, got {type(value).__name__}")


def _text(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        return "".join(_text(v) for v in value)
    if value is None:
        return ""
    return str(value)


def _turns(value: Any) -> list[dict[str, str]]:
    if isinstance(value, dict):
        # {timestamp: [utterances]} or {speaker: utterance}
        flat = []
        for k, v in value.items():
            if isinstance(v, list):
                flat.extend(v)
            else:
                flat.append(f"{k}: {v}")
        value = flat
    out = []
    for raw in value or []:
        if isinstance(raw, dict):
            speaker = str(raw.get("speaker") or raw.get("role") or raw.get("name") or "")
            utt = _text(raw.get("utterance") or raw.get("content") or raw.get("text"))
        else:
            speaker, sep, utt = str(raw).partition(":")
            if not sep:
                speaker, sep, utt = str(raw).partition("：")
            if not sep:
                speaker, utt = "", str(raw)
        out.append({"speaker": speaker.strip(), "utterance": utt.strip()})
    return out


def convert_memory(published: dict[str, Any]) -> list[dict[str, Any]]:
    """Map the published memory file onto canonical CharacterMemory records."""
    records = []
    for name, body in published.items():
        if not isinstance(body, dict):
            raise SchemaError(f"$[{name!r}]", "character entry must be an object")
        profile = {str(k): _text(v) for k, v in (_get(body, "profile") or {}).items()}
        relationships = []
        for peer, rel in _entries(_get(body, "relationships"), "name"):
            if isinstance(rel, dict):
                relationships.append(
                    {
                        "peer_name": str(rel.get("name", peer)),
                        "category": _text(_get(rel, "category", "")) or "unknown",
                        "description": _text(_get(rel, "description", "")),
                    }
                )
            else:
                relationships.append({"peer_name": peer, "category": "unknown", "description": _text(rel)})
        events = []
        for eid, ev in _entries(_get(body, "events"), "id"):
            if isinstance(ev, dict):
                events.append({"event_id": eid, "topic": _text(_get(ev, "topic", "")), "narrative": _text(_get(ev, "narrative", ""))})
            else:
                events.append({"event_id": eid, "topic": "", "narrative": _text(ev)})
        event_ids = {e["event_id"] for e in events}
        dialogues = []
        for did, dlg in _entries(_get(body, "dialogues"), "id"):
            turns = _turns(_get(dlg, "turns") if isinstance(dlg, dict) else dlg)
            eid = _get(dlg, "event_id") if isinstance(dlg, dict) else None
            if eid is None and did in event_ids:
                eid = did
            dialogues.append(
                {"dialogue_id": did, "event_id": str(eid) if eid is not None and str(eid) in event_ids else None, "turns": turns}
            )
        records.append(
            {
                "character_id": name,
                "profile": profile,
                "relationships": relationships,
                "events": events,
                "dialogues": dialogues,
            }
        )
    return records


def _anchor_spans(answer: str, raw: Any) -> list[dict[str, Any]]:
    pairs: list[tuple[str, int | None, int | None]] = []
    if isinstance(raw, dict):
        for text, span in raw.items():
            if isinstance(span, (list, tuple)) and len(span) == 2:
                pairs.append((text, int(span[0]), int(span[1])))
            else:
                pairs.append((text, None, None))
    elif isinstance(raw, list):
        for a in raw:
            if isinstance(a, dict):
                pairs.append((a.get("text", ""), a.get("start"), a.get("end")))
            else:
                pairs.append((str(a), None, None))
    out = []
    for text, start, end in pairs:
        if start is None or answer[start:end] != text:
            # published offsets are not always exact; fall back to search
            start = answer.find(text)
            if start < 0 or not text:
                continue
            end = start + len(text)
        out.append({"text": text, "start": start, "end": end})
    return out


def convert_qa(published: dict[str, Any] | list[Any]) -> list[dict[str, Any]]:
    """Map the published QA file onto canonical QAItem records.

    Anchors whose text cannot be located in the answer are dropped.
    """
    if isinstance(published, list):
        groups = [(str(q.get("name", q.get("character", ""))), [q]) for q in published]
    else:
        groups = list(published.items())
    out = []
    n = 0
    for name, items in groups:
        if isinstance(items, dict):
            # grouped by memory type: {"profile": [...], "events": [...]}
            items = [q for v in items.values() for q in (v if isinstance(v, list) else [v])]
        for q in items:
            n += 1
            answer = _text(_get(q, "answer", ""))
            ref = _get(q, "reference", [])
            refs = [_text(r) for r in ref] if isinstance(ref, list) else [_text(ref)]
            out.append(
                {
                    "qa_id": str(q.get("id", f"q{n:05d}")),
                    "character_id": name,
                    "question": _text(_get(q, "question", "")),
                    "answer": answer,
                    "reference_memory_texts": [r for r in refs if r],
                    "reference_item_ids": [],
                    "anchors": _anchor_spans(answer, _get(q, "anchors", [])),
                }
            )
    return out


def import_published(memory_path: str | Path, qa_path: str | Path | None, out_dir: str | Path) -> dict[str, Path]:
    """Convert published files and write canonical corpus.jsonl / qa.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = convert_memory(json.loads(Path(memory_path).read_text(encoding="utf-8")))
    paths = {"corpus": out / "corpus.jsonl"}
    paths["corpus"].write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8"
    )
    if qa_path is not None:
        qa = convert_qa(json.loads(Path(qa_path).read_text(encoding="utf-8")))
        paths["qa"] = out / "qa.json"
        paths["qa"].write_text(json.dumps(qa, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    return paths
