"""Tokenization, vocabulary, and id mapping for report text."""

import json
import re
from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text):
    """Lowercase, split punctuation off as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens):
    return " ".join(tokens)


@dataclass
class Vocabulary:
    token_to_id: dict = field(default_factory=dict)
    id_to_token: list = field(default_factory=list)
    frequencies: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.id_to_token)

    def id_of(self, token):
        return self.token_to_id.get(token, UNK)

    def token_of(self, idx):
        if not 0 <= idx < len(self.id_to_token):
            raise ValueError(f"id {idx} out of range for vocab of size {len(self)}")
        return self.id_to_token[idx]

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(
                {"tokens": [
                    {"token": t, "id": i, "frequency": self.frequencies.get(t, 0)}
                    for i, t in enumerate(self.id_to_token)
                ]},
                fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            entries = json.load(fh)["tokens"]
        entries.sort(key=lambda e: e["id"])
        vocab = cls()
        vocab.id_to_token = [e["token"] for e in entries]
        vocab.token_to_id = {e["token"]: e["id"] for e in entries}
        # reserved tokens are stored with frequency 0; keep them out of the
        # frequency table so save/load round-trips exactly
        vocab.frequencies = {e["token"]: e["frequency"] for e in entries if e["frequency"]}
        return vocab


def build_vocab(reports, min_freq=3):
    """Count tokens over the corpus; keep those with frequency >= min_freq.

    Ordering is frequency-descending then lexicographic, after the four
    reserved ids, so identical corpora give byte-identical vocab files.
    """
    counts = Counter()
    n_reports = 0
    for report in reports:
        n_reports += 1
        counts.update(tokenize(report))
    if n_reports == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    vocab = Vocabulary()
    vocab.id_to_token = list(RESERVED) + kept
    vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
    vocab.frequencies = {t: counts[t] for t in kept}
    return vocab


@dataclass
class TokenSeq:
    ids: list

    def __len__(self):
        return len(self.ids)


def encode_ids(tokens, vocab, add_bos_eos=False):
    ids = [vocab.id_of(t) for t in tokens]
    if add_bos_eos:
        ids = [BOS] + ids + [EOS]
    return TokenSeq(ids=ids)


def decode_ids(seq, vocab):
    """Ids back to text; reserved tokens are stripped."""
    tokens = []
    for i in seq.ids:
        token = vocab.token_of(i)
        if i >= len(RESERVED):
            tokens.append(token)
    return detokenize(tokens)
