import json
import re

import pytest
from hypothesis import given, strategies as st

from longcxr import textproc
from longcxr.textproc import (
    BOS, EOS, PAD, UNK, RESERVED,
    TokenSeq, Vocabulary, build_vocab, decode_ids, encode_ids, tokenize,
)


class TestTokenize:
    def test_punctuation_split(self):
        assert tokenize("Heart size normal.") == ["heart", "size", "normal", "."]

    def test_empty(self):
        assert tokenize("") == []

    def test_matches_reference_regex_oracle(self):
        # 50-report fixture vs an independently written rule oracle
        oracle = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

        def oracle_tokenize(text):
            out = []
            for chunk in text.lower().split():
                out.extend(oracle.findall(chunk))
            return out

        reports = [
            f"Report {i}: The heart is normal-sized; no effusion, edema or mass. (CXR #{i})"
            for i in range(50)
        ]
        for report in reports:
            assert tokenize(report) == oracle_tokenize(report)


class TestBuildVocab:
    def test_frequency_count_oracle_min1(self):
        vocab = build_vocab(["a b", "a"], min_freq=1)
        assert len(vocab) == 6
        assert set(vocab.id_to_token[4:]) == {"a", "b"}

    def test_frequency_count_oracle_min2(self):
        vocab = build_vocab(["a b", "a"], min_freq=2)
        assert len(vocab) == 5
        assert vocab.id_to_token[4:] == ["a"]

    def test_deterministic_files(self, tmp_path):
        reports = ["the lungs are clear .", "no effusion .", "the heart is normal ."]
        for name in ("v1.json", "v2.json"):
            build_vocab(reports, min_freq=1).save(tmp_path / name)
        assert (tmp_path / "v1.json").read_bytes() == (tmp_path / "v2.json").read_bytes()

    def test_ordering_frequency_then_lexicographic(self):
        vocab = build_vocab(["b a", "b a", "c"], min_freq=1)
        assert vocab.id_to_token[4:] == ["a", "b", "c"]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([], min_freq=1)

    def test_reserved_ids_fixed(self):
        vocab = build_vocab(["x"], min_freq=1)
        assert vocab.id_to_token[:4] == list(RESERVED)
        assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)

    def test_save_load_roundtrip(self, tmp_path):
        vocab = build_vocab(["a b c", "a b", "a"], min_freq=1)
        vocab.save(tmp_path / "v.json")
        loaded = Vocabulary.load(tmp_path / "v.json")
        assert loaded.id_to_token == vocab.id_to_token
        assert loaded.frequencies == vocab.frequencies


class TestEncodeDecode:
    @pytest.fixture
    def vocab(self):
        return build_vocab(["heart size normal . a"], min_freq=1)

    def test_roundtrip(self, vocab):
        text = "heart size normal ."
        seq = encode_ids(tokenize(text), vocab)
        assert decode_ids(seq, vocab) == text

    def test_unknown_token_maps_to_unk(self, vocab):
        seq = encode_ids(["zebra"], vocab)
        assert seq.ids == [UNK]

    def test_bos_eos_wrapping(self, vocab):
        seq = encode_ids(["a"], vocab, add_bos_eos=True)
        assert seq.ids == [BOS, vocab.id_of("a"), EOS]
        assert len(seq) == 3

    def test_decode_strips_reserved(self, vocab):
        seq = TokenSeq(ids=[BOS, vocab.id_of("heart"), EOS, PAD])
        assert decode_ids(seq, vocab) == "heart"

    def test_decode_out_of_range_errors(self, vocab):
        with pytest.raises(ValueError):
            decode_ids(TokenSeq(ids=[len(vocab)]), vocab)

    @given(st.lists(st.sampled_from("heart size normal . a".split()), min_size=1, max_size=12))
    def test_roundtrip_property(self, tokens):
        vocab = build_vocab(["heart size normal . a"], min_freq=1)
        seq = encode_ids(tokens, vocab, add_bos_eos=True)
        assert len(seq) == len(tokens) + 2
        assert decode_ids(seq, vocab) == " ".join(tokens)

    def test_reserved_never_collide(self):
        vocab = build_vocab(["<pad> <bos> word"], min_freq=1)
        # corpus text that tokenizes near the reserved strings still cannot
        # claim ids 0..3
        for tok in vocab.id_to_token[4:]:
            assert vocab.token_to_id[tok] >= 4
