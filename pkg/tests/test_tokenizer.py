"""Vocabulary construction, encode/decode contracts, vocab file format."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipsum import tokenizer as tok
from clipsum.tokenizer import (BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocab,
                               build_vocab, decode, encode, load_vocab,
                               normalize, save_vocab)


class TestBuildVocab:
    def test_frequency_order(self):
        v = build_vocab(["a a b"])
        assert "a" in v and "b" in v
        assert v.id_of("a") < v.id_of("b")

    def test_capacity_keeps_top_tokens_only(self):
        v = build_vocab(["x x x y y z"], max_size=5)
        assert len(v) == 5
        assert "x" in v
        assert "y" not in v and "z" not in v

    def test_tie_breaks_lexicographically(self):
        v = build_vocab(["b a"])
        assert v.id_of("a") < v.id_of("b")

    def test_max_size_too_small(self):
        with pytest.raises(ValueError, match="max_size"):
            build_vocab(["a"], max_size=4)

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty"):
            build_vocab([])

    def test_reserved_ids_fixed(self):
        v = build_vocab(["hello world"])
        assert v.token_of(PAD_ID) == "<pad>"
        assert v.token_of(BOS_ID) == "<bos>"
        assert v.token_of(EOS_ID) == "<eos>"
        assert v.token_of(UNK_ID) == "<unk>"


class TestEncode:
    def setup_method(self):
        self.vocab = build_vocab(["hello world one two three"])

    def test_empty_input(self):
        assert encode("", self.vocab) == [BOS_ID, EOS_ID]

    def test_truncates_from_the_end(self):
        long_text = " ".join(f"w{i}" for i in range(600))
        vocab = build_vocab([long_text], max_size=700)
        ids = encode(long_text, vocab, max_len=512)
        assert len(ids) == 512
        assert ids[0] == BOS_ID and ids[-1] == EOS_ID
        first_510 = [vocab.id_of(f"w{i}") for i in range(510)]
        assert ids[1:511] == first_510

    def test_round_trip_for_in_vocab_text(self):
        text = "Hello, WORLD one"
        vocab = build_vocab([text])
        assert decode(encode(text, vocab), vocab) == normalize(text)

    def test_oov_becomes_unk(self):
        ids = encode("hello zebra", self.vocab)
        assert UNK_ID in ids

    def test_max_len_lower_bound(self):
        with pytest.raises(ValueError, match="max_len"):
            encode("hi", self.vocab, max_len=1)

    @settings(max_examples=60, deadline=None)
    @given(st.text(max_size=200), st.integers(min_value=2, max_value=40))
    def test_shape_invariants(self, text, max_len):
        ids = encode(text, self.vocab, max_len=max_len)
        assert len(ids) <= max_len
        assert ids[0] == BOS_ID
        assert ids.count(EOS_ID) == 1 and ids[-1] == EOS_ID


class TestDecode:
    def setup_method(self):
        self.vocab = build_vocab(["hello world"])

    def test_empty(self):
        assert decode([BOS_ID, EOS_ID], self.vocab) == ""

    def test_basic(self):
        ids = [BOS_ID, self.vocab.id_of("hello"), self.vocab.id_of("world"), EOS_ID]
        assert decode(ids, self.vocab) == "hello world"

    def test_pads_after_eos_ignored(self):
        ids = [BOS_ID, self.vocab.id_of("hello"), EOS_ID, PAD_ID, PAD_ID]
        assert decode(ids, self.vocab) == "hello"

    def test_out_of_range_id(self):
        with pytest.raises(ValueError, match="out of range"):
            decode([BOS_ID, 999, EOS_ID], self.vocab)


class TestNormalization:
    def test_punctuation_splits(self):
        assert tok.tokenize("Hello, world!") == ["hello", ",", "world", "!"]

    def test_whitespace_collapse(self):
        assert normalize("  a\t b\nc ") == "a b c"


class TestVocabFile:
    def test_round_trip(self, tmp_path):
        v = build_vocab(["some tokens for the file"])
        path = tmp_path / "vocab.txt"
        save_vocab(path, v)
        v2 = load_vocab(path)
        assert v2.id_to_token == v.id_to_token

    def test_first_four_lines_are_reserved(self, tmp_path):
        v = build_vocab(["x"])
        path = tmp_path / "vocab.txt"
        save_vocab(path, v)
        lines = path.read_text().splitlines()
        assert lines[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
        # content token line index (0-based, after the reserved block) = id - 4
        assert lines[4] == v.token_of(4)

    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Vocab(["<pad>", "<bos>", "<eos>", "<unk>", "a", "a"])
