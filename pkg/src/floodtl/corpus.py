"""Tweet ingestion, cleaning, vocabularies, splits and descriptive statistics."""
from __future__ import annotations

import csv
import enum
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, LabelError, RowError

HEADER = ["tweet_id", "text", "label"]
SPECIALS = ["<unk>", "<pad>", "<bos>", "<eos>"]
UNK, PAD, BOS, EOS = range(4)


class Label(str, enum.Enum):
    RELATED = "Related"
    UNRELATED = "Unrelated"

    @classmethod
    def parse(cls, value: str) -> Optional["Label"]:
        v = value.strip().lower()
        if not v:
            return None
        for member in cls:
            if member.value.lower() == v:
                return member
        raise LabelError(f"unknown label {value!r}")

    @property
    def index(self) -> int:
        """Class index used by the classifier head (Related is the positive class 1)."""
        return 1 if self is Label.RELATED else 0

    @classmethod
    def from_index(cls, i: int) -> "Label":
        return Label.RELATED if i == 1 else Label.UNRELATED


@dataclass(frozen=True)
class RawTweet:
    id: str
    text: str
    label: Optional[Label] = None

    @property
    def is_empty(self) -> bool:
        return not self.text.strip()


@dataclass(frozen=True)
class CleanTweet:
    id: str
    tokens: tuple
    label: Optional[Label] = None


def load_tweets(path) -> list[RawTweet]:
    """Read a ``tweet_id,text,label`` CSV into RawTweets, preserving file order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise FormatError(f"{path}: empty file, expected header {','.join(HEADER)}")
            if [h.strip().lstrip("﻿") for h in header] != HEADER:
                raise FormatError(f"{path}: expected header {','.join(HEADER)}, got {','.join(header)}")
            out = []
            for row in reader:
                if not row:
                    continue
                if len(row) != 3:
                    raise RowError(reader.line_num, f"expected 3 columns, got {len(row)}")
                tid, text, label = row
                if not tid.strip():
                    raise RowError(reader.line_num, "empty tweet_id")
                try:
                    lab = Label.parse(label)
                except LabelError as exc:
                    raise LabelError(f"line {reader.line_num}: {exc}") from None
                out.append(RawTweet(tid, text, lab))
            return out
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    except csv.Error as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_tweets(tweets: Iterable[RawTweet], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for t in tweets:
            w.writerow([t.id, t.text, t.label.value if t.label else ""])


# --- cleaning -------------------------------------------------------------

_URL = re.compile(r"(?<!\w)(?:http|www)\S*")
_MENTION = re.compile(r"@\w+")
_NON_ALPHA = re.compile(r"[^a-z'\s]+")
_KEEP_SINGLE = {"a", "i"}


def _load_stopwords() -> frozenset:
    text = resources.files("floodtl").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w for w in text.split() if w)


STOPWORDS = _load_stopwords()


def _keep(tok: str, drop_stop: bool) -> bool:
    if not tok or tok.startswith(("http", "www")):
        return False
    if len(tok) == 1 and tok not in _KEEP_SINGLE:
        return False
    return not (drop_stop and tok in STOPWORDS)


def clean_text(text: str, profile: str = "model") -> str:
    """Normalize a tweet to space-separated lowercase word tokens.

    ``profile="stats"`` also drops stop words (descriptive statistics);
    ``profile="model"`` keeps them for language modelling.
    """
    if profile not in ("stats", "model"):
        raise ConfigError(f"unknown cleaning profile {profile!r}")
    t = unicodedata.normalize("NFKD", text).encode("ascii", "ignore").decode("ascii").lower()
    t = _URL.sub(" ", t)
    t = _MENTION.sub(" ", t)
    t = _NON_ALPHA.sub(" ", t)
    drop_stop = profile == "stats"
    toks = (tok.strip("'") for tok in t.split())
    return " ".join(tok for tok in toks if _keep(tok, drop_stop))


def tokenize(clean: str) -> list[str]:
    return [t for t in clean.split(" ") if t]


def clean_tweet(tweet: RawTweet, profile: str = "model") -> CleanTweet:
    return CleanTweet(tweet.id, tuple(tokenize(clean_text(tweet.text, profile))), tweet.label)


def clean_corpus(tweets: Iterable[RawTweet], profile: str = "model") -> list[CleanTweet]:
    return [clean_tweet(t, profile) for t in tweets]


# --- vocabulary -----------------------------------------------------------

@dataclass
class Vocabulary:
    token_of: list[str]
    min_freq: int = 1
    max_size: Optional[int] = None
    id_of: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.token_of[:4] != SPECIALS:
            raise ConfigError("vocabulary must start with the special tokens")
        self.id_of = {t: i for i, t in enumerate(self.token_of)}
        if len(self.id_of) != len(self.token_of):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.token_of)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of


def build_vocab(corpus: Sequence, min_freq: int = 1, max_size: Optional[int] = None) -> Vocabulary:
    """Rank tokens by (count desc, token asc), keep those seen ``min_freq`` times.

    ``corpus`` items are CleanTweets or plain token sequences.
    """
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    if max_size is not None and max_size < 0:
        raise ConfigError(f"max_size must be >= 0, got {max_size}")
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for doc in corpus:
        counts.update(doc.tokens if isinstance(doc, CleanTweet) else doc)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                    key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary(SPECIALS + ranked, min_freq, max_size)


def numericalize(tokens, vocab: Vocabulary, add_bounds: bool = False) -> list[int]:
    if isinstance(tokens, CleanTweet):
        tokens = tokens.tokens
    ids = [vocab.id_of.get(t, UNK) for t in tokens]
    return [BOS] + ids + [EOS] if add_bounds else ids


def denumericalize(ids: Iterable[int], vocab: Vocabulary, strip_bounds: bool = True) -> list[str]:
    toks = [vocab.token_of[i] for i in ids]
    if strip_bounds:
        toks = [t for t in toks if t not in ("<bos>", "<eos>", "<pad>")]
    return toks


def token_stream(docs: Iterable, vocab: Vocabulary) -> np.ndarray:
    """Concatenate documents, each wrapped in <bos>/<eos>, into one id stream."""
    ids: list[int] = []
    for d in docs:
        ids.extend(numericalize(d, vocab, add_bounds=True))
    return np.asarray(ids, dtype=np.int64)


# --- splits ---------------------------------------------------------------

def round_half_up(x) -> int:
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass
class DatasetSplit:
    train: list
    test: list
    ratio: float
    seed: int
    stratified: bool

    def test_ids(self) -> list[str]:
        return [t.id for t in self.test]


def _by_label(data) -> dict:
    groups: dict = {}
    for i, t in enumerate(data):
        if t.label is None:
            raise LabelError(f"record {t.id!r} has no label")
        groups.setdefault(t.label.value, []).append(i)
    return dict(sorted(groups.items()))


def split(data: Sequence, ratio: float = 0.7, seed: int = 0, stratified: bool = True) -> DatasetSplit:
    """Deterministic train/test partition; input order is kept inside each part."""
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    if stratified:
        train_idx = []
        for idx in _by_label(data).values():
            perm = rng.permutation(len(idx))
            k = round_half_up(Decimal(str(ratio)) * len(idx))
            train_idx.extend(idx[j] for j in perm[:k])
    else:
        perm = rng.permutation(len(data))
        train_idx = perm[: round_half_up(Decimal(str(ratio)) * len(data))].tolist()
    in_train = np.zeros(len(data), dtype=bool)
    in_train[list(train_idx)] = True
    return DatasetSplit([t for t, m in zip(data, in_train) if m],
                        [t for t, m in zip(data, in_train) if not m],
                        ratio, seed, stratified)


def subsample_labels(train: Sequence, fraction: float, seed: int = 0) -> list:
    """Stratified random subset holding ``fraction`` percent of ``train``.

    Class quotas use largest remainders, ties going to the lexicographically
    first label. Selected records keep their input order.
    """
    if not 0 < fraction <= 100:
        raise ConfigError(f"label fraction must be in (0, 100], got {fraction}")
    groups = _by_label(train)
    if fraction == 100:
        return list(train)
    n = len(train)
    total = round_half_up(Decimal(str(fraction)) * n / 100)
    exact = {k: Decimal(str(fraction)) * len(v) / 100 for k, v in groups.items()}
    quota = {k: int(e) for k, e in exact.items()}
    by_rem = sorted(groups, key=lambda k: (-(exact[k] - quota[k]), k))
    for k in by_rem[: max(0, total - sum(quota.values()))]:
        quota[k] += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for k, idx in groups.items():
        perm = rng.permutation(len(idx))
        chosen.extend(idx[j] for j in perm[: quota[k]])
    return [train[i] for i in sorted(chosen)]


# --- statistics -----------------------------------------------------------

@dataclass
class NGramStats:
    n: int
    counts: Counter
    top_k: int

    def top(self) -> list[tuple]:
        ranked = sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[: self.top_k]


def ngram_stats(corpus: Sequence, n: int, top_k: int = 20) -> NGramStats:
    if n not in (1, 2, 3):
        raise ConfigError(f"n must be 1, 2 or 3, got {n}")
    counts: Counter = Counter()
    for doc in corpus:
        toks = doc.tokens if isinstance(doc, CleanTweet) else tuple(doc)
        counts.update(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))
    return NGramStats(n, counts, top_k)


def length_stats(corpus: Sequence[RawTweet]) -> tuple[Counter, Counter]:
    """Histograms (bin width 1) of words per tweet and characters per raw tweet."""
    words: Counter = Counter()
    chars: Counter = Counter()
    for t in corpus:
        words[len(tokenize(clean_text(t.text, "model")))] += 1
        chars[len(t.text)] += 1
    return words, chars


def class_counts(corpus: Sequence) -> dict:
    c = Counter(t.label.value if t.label else "" for t in corpus)
    return {lab.value: c.get(lab.value, 0) for lab in Label} | ({"unlabeled": c[""]} if c[""] else {})


def write_ngram_csv(stats: NGramStats, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ngram", "count"])
        for gram, c in stats.top():
            w.writerow([" ".join(gram), c])


def write_histogram_csv(hist: Counter, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "count"])
        for b in sorted(hist):
            w.writerow([b, hist[b]])


def read_text_corpus(path) -> list[tuple]:
    """Load a plain-text corpus as model-profile token lists, one document per non-blank line."""
    docs = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            toks = tokenize(clean_text(line, "model"))
            if toks:
                docs.append(tuple(toks))
    return docs
