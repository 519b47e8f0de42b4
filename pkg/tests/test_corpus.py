import json

import numpy as np
import pytest

from apigraph.corpus import (
    AppRecord,
    CodeBlock,
    Corpus,
    PiVocabulary,
    SyntheticSpec,
    api_name,
    build_pi_vocab,
    generate_synthetic_corpus,
    load_corpus,
    parse_manifest,
    parse_smali,
    vectorize_pi,
    write_corpus,
)
from apigraph.errors import EmptyCorpus, MissingLabel, SpecInvalid, UnterminatedMethod


def test_parse_smali_single_block():
    text = ".method a\n invoke-virtual {v0}, La/B;->c(I)V\n invoke-static {}, Ld/E;->f()V\n.end method"
    blocks = parse_smali(text)
    assert len(blocks) == 1
    assert blocks[0].calls == ("La/B;->c", "Ld/E;->f")


def test_parse_smali_drops_empty_method():
    assert parse_smali(".method a\n.end method") == []


def test_parse_smali_block_ids():
    text = ".method a\n invoke-static {}, La/B;->c()V\n.end method\n.method b\n invoke-static {}, La/B;->d()V\n.end method\n"
    assert [b.block_id for b in parse_smali(text)] == [0, 1]


def test_parse_smali_unterminated():
    with pytest.raises(UnterminatedMethod):
        parse_smali(".method a\n invoke-static {}, La/B;->c()V\n")


def test_parse_manifest():
    perms, intents = parse_manifest("permission: android.permission.SEND_SMS\nintent: android.intent.action.MAIN")
    assert perms == {"android.permission.SEND_SMS"}
    assert intents == {"android.intent.action.MAIN"}
    assert parse_manifest("") == (frozenset(), frozenset())
    perms, _ = parse_manifest("permission: P\npermission: P\n")
    assert len(perms) == 1


def _app(app_id, label, perms=(), intents=()):
    return AppRecord(app_id, label, (CodeBlock(0, ("La/B;->c",)),), frozenset(perms), frozenset(intents))


def test_load_corpus_split(tmp_path):
    apps = tuple(_app(f"a{i}", "benign" if i < 5 else "malware") for i in range(10))
    write_corpus(Corpus(apps, {a.app_id: "train" for a in apps}), tmp_path)
    c = load_corpus(tmp_path, 0.7, seed=1)
    assert len(c.train()) == 7 and len(c.test()) == 3
    for part in (c.train(), c.test()):
        assert {a.label for a in part} == {"benign", "malware"}
    assert load_corpus(tmp_path, 0.7, seed=1).split == c.split


def test_load_corpus_empty(tmp_path):
    (tmp_path / "index.jsonl").write_text("")
    with pytest.raises(EmptyCorpus):
        load_corpus(tmp_path, 0.7, 0)


def test_load_corpus_unlisted_app(tmp_path):
    apps = (_app("a0", "benign"), _app("a1", "malware"))
    write_corpus(Corpus(apps, {"a0": "train", "a1": "test"}), tmp_path)
    (tmp_path / "stray").mkdir()
    with pytest.raises(MissingLabel):
        load_corpus(tmp_path, 0.5, 0)


def test_synthetic_motif_planting():
    motif = [7, 8, 9]
    spec = SyntheticSpec(n_benign=200, n_malware=100, vocab_size=500, motifs=[motif])
    c = generate_synthetic_corpus(spec, 42)
    names = {api_name(i) for i in motif}
    for app in c.apps:
        hit = any(names <= set(b.calls) for b in app.blocks)
        assert hit == (app.label == "malware")


def test_synthetic_benign_only():
    c = generate_synthetic_corpus(SyntheticSpec(n_benign=20, n_malware=0), 1)
    assert {a.label for a in c.apps} == {"benign"}


def test_synthetic_determinism_on_disk(tmp_path):
    spec = SyntheticSpec(n_benign=15, n_malware=15)
    write_corpus(generate_synthetic_corpus(spec, 42), tmp_path / "a")
    write_corpus(generate_synthetic_corpus(spec, 42), tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synthetic_roundtrip(tmp_path):
    c = generate_synthetic_corpus(SyntheticSpec(n_benign=10, n_malware=10), 3)
    write_corpus(c, tmp_path)
    back = load_corpus(tmp_path, 0.7, 3)
    assert [a.blocks for a in back.apps] == [a.blocks for a in c.apps]
    assert len(json.loads((tmp_path / "index.jsonl").read_text().splitlines()[0])) >= 2


def test_synthetic_spec_rejects_unknown_key():
    with pytest.raises(SpecInvalid):
        SyntheticSpec.from_dict({"n_apps": 3})


def test_pi_vocab_sorted_and_train_only():
    apps = (_app("a", "benign", ["P1"]), _app("b", "malware", ["P2"], ["I1"]), _app("c", "malware", ["P9"]))
    c = Corpus(apps, {"a": "train", "b": "train", "c": "test"})
    vocab = build_pi_vocab(c)
    assert vocab.entries == ("I1", "P1", "P2")
    empty = Corpus((_app("a", "benign"),), {"a": "train"})
    assert len(build_pi_vocab(empty)) == 0


def test_vectorize_pi():
    vocab = PiVocabulary(("A", "B", "C"))
    assert vectorize_pi(_app("x", "benign", ["B"]), vocab).tolist() == [0, 1, 0]
    assert vectorize_pi(_app("x", "benign"), vocab).tolist() == [0, 0, 0]
    assert vectorize_pi(_app("x", "benign", ["B", "Z"]), vocab).tolist() == [0, 1, 0]
    assert np.asarray(vectorize_pi(_app("x", "benign"), vocab)).dtype.kind in "iu"
