import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asem.corpus import (DD, ED, ED_TO_PLUTCHIK, EOS, PAD, SOS, UNK, LabelSchema, MappedDialogue,
                         UnknownEmotionError, build_vocab, load_embeddings, make_batches, map_emotion,
                         prepare_corpus, read_mapped, sentiment_of, split_corpus, synthetic_raw_rows,
                         tokenize, write_mapped)


@pytest.mark.parametrize("fine,tag,coarse", [
    ("proud", ED, "trust"),
    ("guilty", ED, "remorse"),
    ("sadness", DD, "sadness"),
    ("nostalgic", ED, "love"),
    ("terrified", ED, "fear"),
    ("Happiness", DD, "joy"),
    ("no_emotion", DD, "no_emotion"),
])
def test_map_emotion(fine, tag, coarse):
    assert map_emotion(fine, tag).name == coarse


def test_map_emotion_unknown_names_label():
    with pytest.raises(UnknownEmotionError, match="bewildered"):
        map_emotion("bewildered", ED)


def test_sentiment_of():
    assert sentiment_of(map_emotion("joyful", ED), ED).name == "positive"
    assert sentiment_of(map_emotion("no_emotion", DD), DD).name == "neutral"
    with pytest.raises(ValueError):
        sentiment_of("no_emotion", ED)


def test_remorse_sources_are_all_negative():
    sources = [f for f, c in ED_TO_PLUTCHIK.items() if c == "remorse"]
    assert sorted(sources) == ["ashamed", "guilty"]
    assert all(sentiment_of(map_emotion(f, ED), ED).name == "negative" for f in sources)


def test_ed_mapping_never_neutral():
    assert {sentiment_of(map_emotion(f, ED), ED).name for f in ED_TO_PLUTCHIK} == {"positive", "negative"}


def test_emotion_index_bijection():
    for tag in (ED, DD):
        schema = LabelSchema.for_dataset(tag)
        idx = [schema.emotion(e).index for e in schema.emotions]
        assert idx == list(range(len(schema.emotions)))
    assert LabelSchema.for_dataset(ED).sentiments == ("positive", "negative")
    assert LabelSchema.for_dataset(DD).sentiments == ("positive", "negative", "neutral")


def test_tokenize():
    assert tokenize("I am SAD.") == ["i", "am", "sad", "."]
    assert tokenize("wow!! really?") == ["wow", "!", "!", "really", "?"]


def test_build_vocab_counts():
    corpus = [["a", "a", "b"], ["a"]]
    v2 = build_vocab(corpus, min_freq=2)
    assert v2.itos == ["<pad>", "<unk>", "<sos>", "<eos>", "a"]
    assert len(build_vocab(corpus, min_freq=1)) == 6
    assert build_vocab(corpus).itos == build_vocab(corpus).itos


def test_build_vocab_ordering_and_errors():
    v = build_vocab([["b", "c", "c", "a", "b"]])
    assert v.itos[4:] == ["b", "c", "a"]
    with pytest.raises(ValueError):
        build_vocab([])
    with pytest.raises(ValueError):
        build_vocab([["a"]], min_freq=0)


@given(st.lists(st.sampled_from(list("abcdefgh")), min_size=1, max_size=20))
def test_vocab_round_trip(tokens):
    v = build_vocab([tokens])
    assert v.decode(v.encode(tokens)) == tokens
    assert v.encode(["zzz"]) == [UNK]


def test_load_embeddings(tmp_path, small_vocab):
    word = small_vocab.itos[4]
    path = tmp_path / "vec.txt"
    path.write_text(f"{word} 0.1 0.2\nnotinvocab 1.0 2.0\n")
    t1 = load_embeddings(path, small_vocab, 2, seed=5)
    t2 = load_embeddings(path, small_vocab, 2, seed=5)
    assert t1.matrix[4].tolist() == [0.1, 0.2]
    assert np.all(t1.matrix[PAD] == 0)
    assert np.array_equal(t1.matrix, t2.matrix)
    assert t1.matrix.shape == (len(small_vocab), 2)
    assert np.all(np.abs(t1.matrix[5:]) <= 0.1)


def test_load_embeddings_dim_mismatch(tmp_path, small_vocab):
    path = tmp_path / "vec.txt"
    path.write_text("a 0.1 0.2 0.3\n")
    with pytest.raises(ValueError, match="expected 2"):
        load_embeddings(path, small_vocab, 2, seed=0)
    with pytest.raises(OSError):
        load_embeddings(tmp_path / "missing.txt", small_vocab, 2, seed=0)


def _dialogue(history, current, response, emotion="joy"):
    return MappedDialogue([h.split() for h in history], current.split(), response.split(), emotion,
                          sentiment_of(emotion, ED).name)


def test_make_batches_construction():
    schema = LabelSchema.for_dataset(ED)
    d = _dialogue(["hi"], "i am sad", "sorry", "sadness")
    vocab = build_vocab([d])
    (b,) = make_batches([d], 16, vocab, schema)
    assert b.context_ids.shape == (1, 4)
    assert (int(b.current_start[0]), int(b.current_end[0])) == (1, 4)
    assert b.response_ids[0].tolist() == [SOS, vocab.stoi["sorry"], EOS]
    assert int(b.emotion_targets[0]) == schema.emotions.index("sadness")
    assert int(b.sentiment_targets[0]) == 1


def test_make_batches_padding_and_sizes():
    schema = LabelSchema.for_dataset(ED)
    ds = [_dialogue([], "a b c", "x"), _dialogue(["a b"], "c d e", "y z")]
    vocab = build_vocab(ds)
    (b,) = make_batches(ds, 16, vocab, schema)
    assert b.context_ids.shape == (2, 5)
    assert b.context_mask.tolist() == [[True] * 3 + [False] * 2, [True] * 5]
    assert torch.equal(b.context_mask, b.context_ids != PAD)
    assert torch.equal(b.response_mask, b.response_ids != PAD)
    many = [_dialogue([], "a", "x")] * 33
    assert [len(x) for x in make_batches(many, 16, vocab, schema)] == [16, 16, 1]


def test_truncation_drops_oldest_history(caplog):
    schema = LabelSchema.for_dataset(ED)
    d = _dialogue(["h1 h2 h3", "h4"], "c1 c2", "r")
    vocab = build_vocab([d])
    (b,) = make_batches([d], 1, vocab, schema, max_len=4)
    assert vocab.decode(b.context_ids[0].tolist()) == ["h3", "h4", "c1", "c2"]
    assert int(b.current_start[0]) == 2
    assert "dropping 2 oldest" in caplog.text


def test_batching_is_permutation_stable(small_corpus, small_vocab, small_schema):
    single = make_batches(small_corpus[:5], 5, small_vocab, small_schema)[0]
    shuffled = make_batches(small_corpus[:5][::-1], 5, small_vocab, small_schema)[0]
    for i in range(5):
        j = 4 - i
        n = int(single.context_mask[i].sum())
        assert torch.equal(single.context_ids[i, :n], shuffled.context_ids[j, :n])
        assert int(single.current_start[i]) == int(shuffled.current_start[j])


def test_prepare_corpus_and_round_trip(tmp_path):
    rows = synthetic_raw_rows(10, seed=1)
    raw = tmp_path / "raw.jsonl"
    raw.write_text("".join(json.dumps(r) + "\n" for r in rows))
    mapped = prepare_corpus(raw, ED)
    assert mapped and all(m.sentiment in ("positive", "negative") for m in mapped)
    out = tmp_path / "mapped.jsonl"
    write_mapped(mapped, out)
    back = read_mapped(out)
    assert [m.to_record() for m in back] == [m.to_record() for m in mapped]
    assert list(json.loads(out.read_text().splitlines()[0])) == [
        "conversation_id", "dataset_tag", "fine_emotion", "emotion", "sentiment",
        "context_turns", "current_turn", "response"]


def test_prepare_corpus_csv_and_unknown(tmp_path):
    csv = tmp_path / "raw.csv"
    csv.write_text("conversation_id,turn_index,speaker,text,fine_emotion\n"
                   "c1,0,a,I was terrified.,terrified\nc1,1,b,Oh no!,terrified\n")
    (m,) = prepare_corpus(csv, ED)
    assert m.emotion == "fear" and m.response == ["oh", "no", "!"]
    csv.write_text("conversation_id,turn_index,speaker,text,fine_emotion\n"
                   "c1,0,a,hello,bewildered\nc1,1,b,hi,bewildered\n")
    with pytest.raises(UnknownEmotionError, match="bewildered"):
        prepare_corpus(csv, ED)


def test_split_corpus_deterministic(small_corpus):
    a = split_corpus(small_corpus, seed=7)
    b = split_corpus(small_corpus, seed=7)
    assert [len(x) for x in a] == [19, 2, 3]
    assert [d.conversation_id for d in a[0]] == [d.conversation_id for d in b[0]]
