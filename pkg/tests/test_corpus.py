import re
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from floodtl.corpus import (BOS, EOS, UNK, CleanTweet, Label, RawTweet, STOPWORDS, build_vocab,
                            class_counts, clean_corpus, clean_text, denumericalize, length_stats,
                            load_tweets, ngram_stats, numericalize, split, subsample_labels,
                            token_stream, tokenize, write_histogram_csv, write_ngram_csv,
                            write_tweets)
from floodtl.errors import ConfigError, DataError, FormatError, LabelError, RowError

from oracles import ngram_counts

TOKEN_RE = re.compile(r"[a-z][a-z']*")


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _tweets(labels):
    return [CleanTweet(f"t{i}", ("w",), Label(lab)) for i, lab in enumerate(labels)]


# --- loading --------------------------------------------------------------------

def test_load_two_rows(tmp_path):
    p = _write(tmp_path, 'tweet_id,text,label\nt1,"Flood in QLD",Related\nt2,"lunch time",Unrelated\n')
    rows = load_tweets(p)
    assert rows == [RawTweet("t1", "Flood in QLD", Label.RELATED),
                    RawTweet("t2", "lunch time", Label.UNRELATED)]


def test_load_header_only(tmp_path):
    assert load_tweets(_write(tmp_path, "tweet_id,text,label\n")) == []


def test_row_with_two_columns_reports_line(tmp_path):
    p = _write(tmp_path, 'tweet_id,text,label\nt1,a,Related\nt2,b,Unrelated\nt3,"hello"\n')
    with pytest.raises(RowError) as exc:
        load_tweets(p)
    assert exc.value.line == 4


def test_missing_header(tmp_path):
    with pytest.raises(FormatError):
        load_tweets(_write(tmp_path, "t1,Flood,Related\n"))


def test_unknown_label(tmp_path):
    with pytest.raises(LabelError):
        load_tweets(_write(tmp_path, "tweet_id,text,label\nt1,x,Maybe\n"))


def test_labels_case_insensitive_and_empty(tmp_path):
    rows = load_tweets(_write(tmp_path, "tweet_id,text,label\nt1,x,related\nt2,y,UNRELATED\nt3,z,\n"))
    assert [r.label for r in rows] == [Label.RELATED, Label.UNRELATED, None]


def test_invalid_utf8(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_bytes(b"tweet_id,text,label\nt1,\xff\xfe,Related\n")
    with pytest.raises(FormatError):
        load_tweets(p)


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_tweets(tmp_path / "nope.csv")


def test_write_roundtrip(tmp_path):
    tweets = [RawTweet("a", 'quote "x", comma', Label.RELATED), RawTweet("b", "line\nbreak", None)]
    write_tweets(tweets, tmp_path / "o.csv")
    assert load_tweets(tmp_path / "o.csv") == tweets


# --- cleaning -------------------------------------------------------------------

SAMPLE = "RT @abc: Flood in QLD!! http://t.co/xyz #qldfloods 123"


def test_clean_model_profile():
    assert clean_text(SAMPLE, "model") == "rt flood in qld qldfloods"


def test_clean_stats_profile():
    assert "in" in STOPWORDS
    assert clean_text(SAMPLE, "stats") == "rt flood qld qldfloods"


def test_clean_empty():
    assert clean_text("") == ""


@pytest.mark.parametrize("text,expected", [
    ("www.example.com water", "water"),
    ("Rain x y z a i", "rain a i"),
    ("can't stop 'quoted' words", "can't stop quoted words"),
    ("Café FLOOD", "cafe flood"),
    ("@user1 @user2", ""),
    ("#Brisbane#floods", "brisbane floods"),
])
def test_clean_rules(text, expected):
    assert clean_text(text) == expected


def test_clean_unknown_profile():
    with pytest.raises(ConfigError):
        clean_text("x", "bogus")


def test_stopword_list_size():
    assert 140 <= len(STOPWORDS) <= 200


fuzz_text = st.lists(st.sampled_from(list("abcXYZ '@#:/.!?0129_-") + ["http://", "www.", "é", "\n"]),
                     max_size=40).map("".join)


@settings(max_examples=300, deadline=None)
@given(fuzz_text, st.sampled_from(["model", "stats"]))
def test_clean_idempotent_and_tokens_valid(text, profile):
    once = clean_text(text, profile)
    assert clean_text(once, profile) == once
    for tok in tokenize(once):
        assert TOKEN_RE.fullmatch(tok)
        assert len(tok) > 1 or tok in ("a", "i")


@pytest.mark.parametrize("text,expected", [("flood qld", ["flood", "qld"]), ("", []),
                                           ("a'hoy water", ["a'hoy", "water"])])
def test_tokenize(text, expected):
    assert tokenize(text) == expected


# --- vocabulary -----------------------------------------------------------------

CORPUS = [("flood", "water"), ("flood", "road")]


def test_vocab_min_freq_1():
    v = build_vocab(CORPUS)
    assert len(v) == 7
    assert v.token_of[4:] == ["flood", "road", "water"]


def test_vocab_min_freq_2():
    v = build_vocab(CORPUS, min_freq=2)
    assert len(v) == 5 and v.token_of[4] == "flood"


def test_vocab_max_size_tie_break():
    v = build_vocab(CORPUS, max_size=2)
    assert v.token_of[4:] == ["flood", "road"]


def test_vocab_errors():
    with pytest.raises(ConfigError):
        build_vocab(CORPUS, min_freq=0)
    with pytest.raises(DataError):
        build_vocab([])


def test_numericalize_examples():
    v = build_vocab(CORPUS)
    assert numericalize(["flood", "zzz"], v) == [v.id_of["flood"], UNK]
    assert UNK == 0
    assert numericalize([], v, add_bounds=True) == [BOS, EOS]
    assert denumericalize(numericalize(["flood", "road"], v), v) == ["flood", "road"]


def test_token_stream_wraps_docs():
    v = build_vocab(CORPUS)
    s = token_stream([("flood",), ()], v)
    assert s.tolist() == [BOS, v.id_of["flood"], EOS, BOS, EOS]


words = st.lists(st.text(alphabet="abcde", min_size=1, max_size=4), min_size=1, max_size=12)


@settings(max_examples=150, deadline=None)
@given(st.lists(words, min_size=1, max_size=8), st.integers(1, 3), st.one_of(st.none(), st.integers(0, 10)))
def test_vocab_properties(docs, min_freq, max_size):
    v = build_vocab(docs, min_freq, max_size)
    counts = Counter(t for d in docs for t in d)
    for i, t in enumerate(v.token_of):
        assert v.id_of[t] == i
    for t in v.token_of[4:]:
        assert counts[t] >= min_freq
    if max_size is not None:
        assert len(v) <= max_size + 4
    for d in docs:
        if all(t in v for t in d):
            assert denumericalize(numericalize(d, v), v) == list(d)


# --- splits ---------------------------------------------------------------------

def test_split_ten_items():
    s = split(_tweets(["Related"] * 5 + ["Unrelated"] * 5), 0.7, seed=1, stratified=False)
    assert (len(s.train), len(s.test)) == (7, 3)


def test_split_deterministic_and_stratified():
    data = _tweets(["Related"] * 60 + ["Unrelated"] * 40)
    a = split(data, 0.7, seed=3)
    b = split(data, 0.7, seed=3)
    assert a.test_ids() == b.test_ids()
    c = Counter(t.label for t in a.train)
    assert abs(c[Label.RELATED] - 42) <= 1 and abs(c[Label.UNRELATED] - 28) <= 1


def test_split_unlabeled_stratified():
    with pytest.raises(LabelError):
        split([CleanTweet("x", (), None), CleanTweet("y", (), Label.RELATED)], 0.5)


def test_split_ratio_bounds():
    with pytest.raises(ConfigError):
        split(_tweets(["Related"] * 4), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["Related", "Unrelated"]), min_size=2, max_size=60),
       st.floats(0.05, 0.95), st.integers(0, 2**32), st.booleans())
def test_split_invariants(labels, ratio, seed, stratified):
    data = _tweets(labels)
    s = split(data, ratio, seed, stratified)
    train_ids, test_ids = {t.id for t in s.train}, {t.id for t in s.test}
    assert not train_ids & test_ids and len(train_ids) + len(test_ids) == len(data)
    assert abs(len(s.train) - ratio * len(data)) <= 1 + (1 if stratified else 0)
    if stratified:
        for lab in (Label.RELATED, Label.UNRELATED):
            n = sum(1 for t in data if t.label is lab)
            k = sum(1 for t in s.train if t.label is lab)
            assert abs(k - ratio * n) <= 1
    assert split(data, ratio, seed, stratified).test_ids() == s.test_ids()


def test_subsample_five_percent():
    data = _tweets(["Related"] * 50 + ["Unrelated"] * 50)
    sub = subsample_labels(data, 5, seed=0)
    c = Counter(t.label for t in sub)
    assert len(sub) == 5 and sorted(c.values()) == [2, 3]
    assert subsample_labels(data, 5, seed=0) == sub


def test_subsample_identity_and_errors():
    data = _tweets(["Related", "Unrelated"])
    assert subsample_labels(data, 100) == data
    for bad in (0, -1, 100.5):
        with pytest.raises(ConfigError):
            subsample_labels(data, bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["Related", "Unrelated"]), min_size=1, max_size=80),
       st.sampled_from([5, 10, 20, 50, 80, 33.3]), st.integers(0, 1000))
def test_subsample_size(labels, fraction, seed):
    data = _tweets(labels)
    sub = subsample_labels(data, fraction, seed)
    assert abs(len(sub) - fraction * len(data) / 100) <= 0.5 + 1e-9
    ids = [t.id for t in data]
    assert [ids.index(t.id) for t in sub] == sorted(ids.index(t.id) for t in sub)


# --- statistics -----------------------------------------------------------------

def test_ngram_examples():
    docs = [("a", "b", "a"), ("b", "a")]
    assert ngram_stats(docs, 1).counts == {("a",): 3, ("b",): 2}
    assert ngram_stats(docs, 2).counts == {("b", "a"): 2, ("a", "b"): 1}
    assert ngram_stats(docs, 3).counts == {("a", "b", "a"): 1}
    with pytest.raises(ConfigError):
        ngram_stats(docs, 4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcd"), max_size=8), max_size=50), st.integers(1, 3))
def test_ngram_matches_brute_force(docs, n):
    stats = ngram_stats(docs, n, top_k=5)
    assert stats.counts == ngram_counts(docs, n)
    top = stats.top()
    assert top == sorted(top, key=lambda kv: (-kv[1], kv[0]))


def test_length_stats():
    assert length_stats([RawTweet("1", "flood in qld")]) == (Counter({3: 1}), Counter({12: 1}))
    assert length_stats([]) == (Counter(), Counter())
    # single letters other than a/i are dropped before counting
    w, _ = length_stats([RawTweet("1", "a b c"), RawTweet("2", "rain on roof")])
    assert w == Counter({1: 1, 3: 1})


def test_class_counts_and_csv(tmp_path):
    raw = [RawTweet("1", "x", Label.RELATED), RawTweet("2", "y", Label.RELATED), RawTweet("3", "z", None)]
    assert class_counts(raw) == {"Related": 2, "Unrelated": 0, "unlabeled": 1}
    write_ngram_csv(ngram_stats([("a", "b")], 2), tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text() == "ngram,count\na b,1\n"
    write_histogram_csv(Counter({3: 2, 1: 1}), tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "bin,count\n1,1\n3,2\n"


def test_clean_corpus_keeps_ids_and_labels():
    out = clean_corpus([RawTweet("9", "Flooding NOW!", Label.RELATED)])
    assert out == [CleanTweet("9", ("flooding", "now"), Label.RELATED)]
