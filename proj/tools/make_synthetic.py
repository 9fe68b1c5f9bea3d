#!/usr/bin/env python3
"""Regenerates the bundled corpora under data/.

data/vocab.txt       wordpiece vocab shared by every bundled corpus
data/synthetic/      4 intents, 6 slot types, entity words built from pieces
data/simple/         same templates, every word a single vocab piece
data/atis_mini/      a few hand-written ATIS/SNIPS-style utterances

Output is deterministic for a given --seed.
"""

import argparse
import os
import random

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]

# Entity words are stem (+ optional middle) + type suffix; none of the full
# words is in the vocab, so each splits into 2 or 3 pieces and the suffix is
# what decides the slot type.
STEMS = ["mor", "sal", "ber", "kal", "tor", "vin", "lum", "dar"]
MIDDLES = ["##ta", "##ri", "##no"]
SUFFIXES = {
    "city": ["##ville", "##burg", "##ton"],
    "date": ["##day", "##mas"],
    "time": ["##clock", "##noon"],
    "track": ["##song", "##tune"],
    "genre": ["##wave", "##core"],
    "cuisine": ["##ese", "##ian"],
}
SIMPLE_VALUES = {
    "city": ["boston", "denver", "paris"],
    "date": ["monday", "friday"],
    "time": ["noon", "midnight"],
    "track": ["yesterday", "imagine"],
    "genre": ["jazz", "rock"],
    "cuisine": ["sushi", "tapas"],
}

TEMPLATES = {
    "book_flight": [
        "fly to {city} on {date}",
        "book a flight to {city}",
        "i need a ticket to {city} {date}",
        "show me {city}",
    ],
    "get_weather": [
        "weather in {city} at {time}",
        "is it cold in {city}",
        "forecast for {date} at {time}",
        "show me {time}",
    ],
    "play_music": [
        "play {track}",
        "play some {genre} music",
        "put on {track} by {genre}",
        "show me {track}",
    ],
    "find_restaurant": [
        "find {cuisine} food in {city}",
        "table for {cuisine} at {time}",
        "any {cuisine} place",
        "show me {cuisine}",
    ],
}

ATIS_MINI = {
    "train": [
        ("my phone is playing a lossless music", "O O O B-MusicPlay O B-MusicType I-MusicType", "PlayMusic"),
        ("what is the earliest flight from memphis to cincinnati on june thirtieth",
         "O O O B-flight_mod O O B-fromloc.city_name O B-toloc.city_name O "
         "B-depart_date.month_name B-depart_date.day_number", "atis_flight"),
        ("play redbreast now", "O B-track O", "PlayMusic"),
        ("flight from boston to denver", "O O B-fromloc.city_name O B-toloc.city_name", "atis_flight"),
    ],
    "test": [
        ("what is the earliest flight from boston to memphis on june thirtieth",
         "O O O B-flight_mod O O B-fromloc.city_name O B-toloc.city_name O "
         "B-depart_date.month_name B-depart_date.day_number", "atis_flight"),
        ("playing lossless music", "B-MusicPlay B-MusicType I-MusicType", "PlayMusic"),
    ],
    "dev": [
        ("flight from memphis to boston", "O O B-fromloc.city_name O B-toloc.city_name", "atis_flight"),
    ],
}

EXTRA_WORDS = [
    # atis_mini and the tokenizer examples
    "my", "phone", "is", "a", "play", "##ing", "loss", "##less", "music", "what", "the", "earliest",
    "flight", "from", "memphis", "to", "cincinnati", "on", "june", "th", "##ir", "##tie", "##th",
    "red", "##bre", "##ast", "now",
]


def template_words():
    words = []
    for temps in TEMPLATES.values():
        for t in temps:
            for w in t.split():
                if not w.startswith("{"):
                    words.append(w)
    return words


def build_vocab():
    tokens = list(SPECIALS)
    seen = set(tokens)

    def add(tok):
        if tok not in seen:
            seen.add(tok)
            tokens.append(tok)

    for w in template_words() + EXTRA_WORDS:
        add(w)
    for vals in SIMPLE_VALUES.values():
        for v in vals:
            add(v)
    for s in STEMS:
        add(s)
    for m in MIDDLES:
        add(m)
    for sufs in SUFFIXES.values():
        for s in sufs:
            add(s)
    return tokens


def entity_word(rng, slot, simple):
    if simple:
        return rng.choice(SIMPLE_VALUES[slot])
    word = rng.choice(STEMS)
    if rng.random() < 0.3:
        word += rng.choice(MIDDLES)[2:]
    return word + rng.choice(SUFFIXES[slot])[2:]


def utterance(rng, intent, simple):
    template = rng.choice(TEMPLATES[intent])
    words, tags = [], []
    for tok in template.split():
        if tok.startswith("{"):
            slot = tok[1:-1]
            words.append(entity_word(rng, slot, simple))
            tags.append("B-" + slot)
        else:
            words.append(tok)
            tags.append("O")
    return " ".join(words), " ".join(tags), intent


def corpus(rng, n, simple):
    intents = list(TEMPLATES)
    out = []
    for i in range(n):
        out.append(utterance(rng, intents[i % len(intents)], simple))
    rng.shuffle(out)
    return out


def write_split(root, split, rows):
    d = os.path.join(root, split)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "seq.in"), "w") as f_in, \
         open(os.path.join(d, "seq.out"), "w") as f_out, \
         open(os.path.join(d, "label"), "w") as f_lab:
        for words, tags, intent in rows:
            f_in.write(words + "\n")
            f_out.write(tags + "\n")
            f_lab.write(intent + "\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data"))
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    rng = random.Random(args.seed)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "vocab.txt"), "w") as f:
        f.write("\n".join(build_vocab()) + "\n")

    sizes = {"train": 64, "dev": 64, "test": 256}
    for name, simple in (("synthetic", False), ("simple", True)):
        for split, n in sizes.items():
            write_split(os.path.join(args.out, name), split, corpus(rng, n, simple))
    for split, rows in ATIS_MINI.items():
        write_split(os.path.join(args.out, "atis_mini"), split, rows)


if __name__ == "__main__":
    main()
