import hashlib

from memq.classifier import evaluate_classifier, train
from memq.store import align_references, ingest_database, iter_json_objects, load_qa, segment_memories, serialize_database, validate_anchor_spans
from memq.synthetic import GenSpec, generate_corpus, split_labeled, write_corpus
from memq.text import normalize


def digest(corpus):
    h = hashlib.sha256(serialize_database(corpus.db).encode())
    for q in corpus.qa:
        h.update(repr(q).encode())
    return h.hexdigest()


def test_deterministic():
    spec = GenSpec(seed=7, n_characters=5)
    assert digest(generate_corpus(spec)) == digest(generate_corpus(spec))
    assert digest(generate_corpus(GenSpec(seed=8, n_characters=5))) != digest(generate_corpus(spec))


def test_files_deterministic(tmp_path):
    spec = GenSpec(seed=7, n_characters=3)
    a = write_corpus(tmp_path / "a", generate_corpus(spec), seed=7)
    b = write_corpus(tmp_path / "b", generate_corpus(spec), seed=7)
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_schema_valid_and_spans(small_corpus):
    db = ingest_database(list(iter_json_objects(serialize_database(small_corpus.db))))
    assert len(db) == 5
    qa = load_qa([q.to_dict() for q in small_corpus.qa])
    assert all(validate_anchor_spans(q) == [] for q in qa)


def test_references_align_exactly(small_corpus):
    items = segment_memories(small_corpus.db)
    stripped = [q.__class__(**{**q.__dict__, "reference_item_ids": ()}) for q in small_corpus.qa]
    aligned, unaligned = align_references(stripped, items)
    assert unaligned == []
    assert [q.reference_item_ids for q in aligned] == [q.reference_item_ids for q in small_corpus.qa]


def test_anchors_unique_to_reference_item(full_corpus):
    items = segment_memories(full_corpus.db)
    by_char = {}
    for it in items:
        by_char.setdefault(it.character_id, []).append(it)
    for q in full_corpus.qa:
        assert q.anchors
        for a in q.anchors:
            holders = [it.item_id for it in by_char[q.character_id] if normalize(a.text) in it.text]
            assert holders == list(q.reference_item_ids)


def test_shipped_spec_shape(full_corpus):
    assert len(full_corpus.db) == 20
    assert len(full_corpus.labeled) >= 400
    labels = [lbl for _, lbl in full_corpus.labeled]
    assert labels.count(labels[0]) == len(labels) // 2


def test_label_separability(full_corpus):
    train_set, test_set = split_labeled(full_corpus.labeled, seed=42)
    assert len(train_set) == len(test_set)
    assert evaluate_classifier(train(train_set), test_set).accuracy >= 0.9


def test_many_seeds_keep_anchors_unique():
    # generate_corpus raises if any anchor occurs in more than one item
    for seed in range(40):
        generate_corpus(GenSpec(seed=seed, n_characters=30, qa_per_char=20))
