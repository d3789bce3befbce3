"""Procedural text generators for desk-scale runs and tests.

``general_corpus`` produces topic-coherent English-like paragraphs standing in
for a large general-domain corpus. ``synthetic_tweets`` produces labeled
tweets with tweet noise (mentions, URLs, hashtags, digits) whose class is
decided by which topic vocabulary they draw from: flood tweets are Related,
every other topic is Unrelated.
"""
from __future__ import annotations

import numpy as np

from .corpus import Label, RawTweet

# (nouns, verbs as (base, third person, past), adjectives)
TOPICS = {
    "flood": (
        "flood floods water river creek rain storm levee dam bridge street suburb warning "
        "evacuation rescue sandbag gauge peak torrent cyclone inundation damage debris mud "
        "emergency crew boat helicopter rainfall downpour catchment drain shelter residents "
        "floodwater stormwater highway causeway riverbank".split(),
        [("flood", "floods", "flooded"), ("rise", "rises", "rose"), ("evacuate", "evacuates", "evacuated"),
         ("rescue", "rescues", "rescued"), ("inundate", "inundates", "inundated"),
         ("submerge", "submerges", "submerged"), ("swamp", "swamps", "swamped"),
         ("overflow", "overflows", "overflowed"), ("recede", "recedes", "receded"),
         ("surge", "surges", "surged"), ("sandbag", "sandbags", "sandbagged"),
         ("strand", "strands", "stranded")],
        "flooded rising heavy swollen submerged muddy torrential severe stranded evacuated "
        "waterlogged drenched soaked stormy".split(),
    ),
    "sport": (
        "game match team coach player goal score season league final stadium ball referee "
        "striker keeper fans trophy tournament innings wicket pitch cricket football rugby "
        "tennis court medal race".split(),
        [("win", "wins", "won"), ("lose", "loses", "lost"), ("play", "plays", "played"),
         ("score", "scores", "scored"), ("coach", "coaches", "coached"), ("kick", "kicks", "kicked"),
         ("tackle", "tackles", "tackled"), ("cheer", "cheers", "cheered"), ("train", "trains", "trained"),
         ("defend", "defends", "defended")],
        "winning losing brilliant undefeated competitive athletic sporty fierce".split(),
    ),
    "food": (
        "lunch dinner breakfast coffee pizza burger salad pasta cake chocolate restaurant cafe "
        "kitchen recipe chef menu dessert sandwich noodles sushi bakery bread cheese tea "
        "snack".split(),
        [("cook", "cooks", "cooked"), ("eat", "eats", "ate"), ("bake", "bakes", "baked"),
         ("taste", "tastes", "tasted"), ("order", "orders", "ordered"), ("grill", "grills", "grilled"),
         ("serve", "serves", "served"), ("brew", "brews", "brewed"), ("munch", "munches", "munched")],
        "delicious tasty spicy sweet crispy savory yummy hungry fresh cheesy".split(),
    ),
    "music": (
        "song album concert band guitar singer drummer tour playlist track stage festival "
        "lyrics chorus melody piano gig radio vinyl headphones rapper orchestra".split(),
        [("sing", "sings", "sang"), ("listen", "listens", "listened"), ("dance", "dances", "danced"),
         ("perform", "performs", "performed"), ("record", "records", "recorded"),
         ("strum", "strums", "strummed"), ("stream", "streams", "streamed"), ("rock", "rocks", "rocked")],
        "catchy loud acoustic live melodic funky groovy epic".split(),
    ),
    "tech": (
        "phone laptop app software update screen battery computer internet website code "
        "server game keyboard tablet camera charger wifi password browser gadget robot".split(),
        [("download", "downloads", "downloaded"), ("install", "installs", "installed"),
         ("charge", "charges", "charged"), ("crash", "crashes", "crashed"), ("code", "codes", "coded"),
         ("upgrade", "upgrades", "upgraded"), ("browse", "browses", "browsed"),
         ("reboot", "reboots", "rebooted")],
        "wireless digital smart buggy slow shiny portable online".split(),
    ),
    "shopping": (
        "shop mall store sale discount dress shoes jacket bag gift price brand fashion outfit "
        "jeans sneakers wallet jewellery boutique receipt bargain".split(),
        [("buy", "buys", "bought"), ("shop", "shops", "shopped"), ("wear", "wears", "wore"),
         ("sell", "sells", "sold"), ("spend", "spends", "spent"), ("try", "tries", "tried"),
         ("wrap", "wraps", "wrapped")],
        "cheap expensive stylish trendy comfy fancy cute pricey".split(),
    ),
    "movies": (
        "movie film cinema actor actress director trailer sequel premiere popcorn series episode "
        "show scene script plot villain hero ticket screening".split(),
        [("watch", "watches", "watched"), ("film", "films", "filmed"), ("direct", "directs", "directed"),
         ("review", "reviews", "reviewed"), ("binge", "binges", "binged"), ("laugh", "laughs", "laughed"),
         ("cry", "cries", "cried")],
        "hilarious scary boring thrilling funny dramatic animated romantic".split(),
    ),
}

DET = "the a this that my our their your every some".split()
PRON = "we they people everyone i you she he".split()
AUX = "will can should might must could".split()
PREP = "in near at on across around behind over into".split()
ADV = "today tonight again now already soon still really very quickly".split()
TIME = "this morning|this afternoon|last night|on monday|on the weekend|after work|before dinner|all day".split("|")
PLACES = "the city|the town|the valley|the coast|the north|the south|the centre|the park|the village".split("|")
GENERIC_NOUNS = "day week people time friends family news update photo video morning night place".split()
GENERIC_ADJ = "good great new big little bad long best amazing crazy".split()

TWEET_ONLY = {
    "flood": "qldfloods bigwet brisbane ipswich bundaberg rockhampton qld queensland ses bom "
             "lockyer toowoomba gympie".split(),
    "sport": "afl nrl grandfinal goteam matchday".split(),
    "food": "foodie brunch nomnom foodporn".split(),
    "music": "nowplaying newmusic livemusic".split(),
    "tech": "iphone android techtuesday".split(),
    "shopping": "shopaholic ootd blackfriday".split(),
    "movies": "netflix boxoffice moviemarathon".split(),
}


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _zipf_pick(rng: np.random.Generator, seq, s: float = 1.0):
    w = 1.0 / np.arange(1, len(seq) + 1) ** s
    return seq[int(rng.choice(len(seq), p=w / w.sum()))]


def sentence(topic: str, rng: np.random.Generator) -> str:
    nouns, verbs, adjs = TOPICS[topic]
    n = lambda: _zipf_pick(rng, nouns, 0.6)
    v = lambda: _pick(rng, verbs)
    a = lambda: _pick(rng, adjs + GENERIC_ADJ[:3])
    form = int(rng.integers(7))
    if form == 0:
        return f"{_pick(rng, DET)} {a()} {n()} {v()[1]} {_pick(rng, PREP)} {_pick(rng, PLACES)}"
    if form == 1:
        return f"{_pick(rng, PRON)} {_pick(rng, AUX)} {v()[0]} the {n()} {_pick(rng, ADV)}"
    if form == 2:
        return f"the {n()} {_pick(rng, PREP)} {_pick(rng, PLACES)} is {a()} {_pick(rng, TIME)}"
    if form == 3:
        return f"{_pick(rng, PRON)} {v()[2]} {_pick(rng, DET)} {a()} {n()} and the {n()}"
    if form == 4:
        return f"there is a {a()} {n()} {_pick(rng, PREP)} the {_pick(rng, GENERIC_NOUNS)} {_pick(rng, ADV)}"
    if form == 5:
        return f"{_pick(rng, DET)} {n()} and {_pick(rng, DET)} {n()} {v()[2]} {_pick(rng, TIME)}"
    return f"what a {a()} {_pick(rng, GENERIC_NOUNS)} for the {n()} {_pick(rng, ADV)}"


def general_corpus(n_tokens: int = 100_000, seed: int = 0) -> list[str]:
    """Paragraph lines (3-6 sentences of one topic each) totalling about ``n_tokens`` words."""
    rng = np.random.default_rng(seed)
    topics = sorted(TOPICS)
    lines, count = [], 0
    while count < n_tokens:
        topic = _pick(rng, topics)
        sents = [sentence(topic, rng) for _ in range(int(rng.integers(3, 7)))]
        line = ". ".join(s.capitalize() for s in sents) + "."
        lines.append(line)
        count += len(line.split())
    return lines


def _noisy(text: str, topic: str, rng: np.random.Generator) -> str:
    words = text.split()
    if rng.random() < 0.4:
        words.insert(int(rng.integers(len(words) + 1)), _pick(rng, TWEET_ONLY[topic]))
    if rng.random() < 0.3:
        words.append("#" + _pick(rng, TWEET_ONLY[topic] + TOPICS[topic][0]))
    if rng.random() < 0.3:
        words.insert(0, f"@user{int(rng.integers(1000))}")
    if rng.random() < 0.1:
        words.insert(0, "RT")
    if rng.random() < 0.2:
        words.insert(int(rng.integers(len(words) + 1)), str(int(rng.integers(1, 500))))
    if rng.random() < 0.4:
        words.append(f"http://t.co/{''.join(rng.choice(list('abcxyz0123'), 6))}")
    out = " ".join(words)
    if rng.random() < 0.3:
        out = out[0].upper() + out[1:]
    return out + _pick(rng, ["", "!", "!!", ".", " :)", "?"])


def synthetic_tweets(n: int = 2000, seed: int = 0, related_frac: float = 0.5,
                     prefix: str = "t") -> list[RawTweet]:
    """Labeled tweets: Related ones are about floods, Unrelated ones about another topic."""
    rng = np.random.default_rng(seed)
    others = sorted(t for t in TOPICS if t != "flood")
    n_rel = int(round(n * related_frac))
    labels = [Label.RELATED] * n_rel + [Label.UNRELATED] * (n - n_rel)
    order = rng.permutation(n)
    out = []
    for k, j in enumerate(order):
        label = labels[j]
        topic = "flood" if label is Label.RELATED else _pick(rng, others)
        text = " ".join(sentence(topic, rng) for _ in range(int(rng.integers(1, 3))))
        out.append(RawTweet(f"{prefix}{k}", _noisy(text, topic, rng), label))
    return out
