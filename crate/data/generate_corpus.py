#!/usr/bin/env python3
"""Generate the bundled character-level training corpus.

The text is produced from a small stochastic grammar with a fixed seed, so the
output is byte-for-byte reproducible. The generated text is dedicated to the
public domain (CC0 1.0).

    python3 data/generate_corpus.py > data/corpus.txt
"""

import random
import sys
import textwrap

SEED = 1959
TARGET_BYTES = 1_050_000

NAMES = [
    "Anna", "Boris", "Clara", "Daniel", "Edith", "Felix", "Greta", "Henry",
    "Iris", "Jonas", "Klara", "Lukas", "Marta", "Nils", "Olga", "Peter",
    "Rosa", "Simon", "Tessa", "Victor", "Wanda", "Yusuf", "Zora", "Mira",
]
PLACES = [
    "the harbor", "the old mill", "the market", "the village square",
    "the river bank", "the forest edge", "the station", "the library",
    "the bakery", "the lighthouse", "the orchard", "the bridge", "the hill",
    "the schoolhouse", "the garden", "the kitchen", "the workshop",
    "the meadow", "the chapel", "the inn", "the farm", "the pier",
]
OBJECTS = [
    "lantern", "letter", "basket", "map", "coat", "boat", "key", "book",
    "clock", "window", "bell", "horse", "bread", "kettle", "rope", "ladder",
    "candle", "hat", "violin", "compass", "cart", "wheel", "net", "stone",
    "mirror", "box", "song", "story", "garden", "fence", "door", "road",
]
ADJECTIVES = [
    "old", "small", "quiet", "heavy", "bright", "cold", "warm", "broken",
    "green", "narrow", "strange", "gentle", "tired", "careful", "empty",
    "distant", "wooden", "silver", "patient", "hungry", "little", "wet",
    "dark", "golden", "simple", "clever", "long", "short", "proud", "kind",
]
ADVERBS = [
    "slowly", "quickly", "quietly", "carefully", "suddenly", "gladly",
    "softly", "again", "once more", "at last", "without a word", "early",
    "late in the evening", "before dawn", "after supper", "in the rain",
]
VERBS_T = [
    ("carried", "carry"), ("found", "find"), ("mended", "mend"),
    ("opened", "open"), ("painted", "paint"), ("sold", "sell"),
    ("bought", "buy"), ("cleaned", "clean"), ("lost", "lose"),
    ("watched", "watch"), ("hid", "hide"), ("brought", "bring"),
    ("counted", "count"), ("borrowed", "borrow"), ("wrote", "write"),
    ("read", "read"), ("built", "build"), ("pulled", "pull"),
]
VERBS_I = [
    ("walked", "walk"), ("waited", "wait"), ("laughed", "laugh"),
    ("slept", "sleep"), ("worked", "work"), ("sang", "sing"),
    ("listened", "listen"), ("rested", "rest"), ("wandered", "wander"),
    ("stayed", "stay"), ("hurried", "hurry"), ("returned", "return"),
]
WEATHER = [
    "The wind came down from the hills",
    "Rain fell on the roofs all afternoon",
    "The sun stood low over the water",
    "Snow covered the fields",
    "A thin fog lay over the river",
    "The air was still and warm",
    "Clouds gathered in the west",
    "The night was clear and full of stars",
]
FEELINGS = [
    "happy", "worried", "curious", "afraid", "calm", "sad", "surprised",
    "hopeful", "angry", "grateful", "sleepy", "restless",
]
CONNECTORS = [
    "and then", "but", "so", "because", "while", "although", "until",
    "after", "before", "when",
]
SAYINGS = [
    "We should go home before it gets dark",
    "I have never seen anything like it",
    "Tomorrow will be a better day",
    "Do you remember where we left it",
    "There is always more work to do",
    "Let us wait a little longer",
    "The river is higher than last year",
    "Nobody knows the way better than you",
    "It is only a story, after all",
    "Bring the lantern, the path is long",
    "I think the clock is running late",
    "You can keep it if you want",
]


def pick(rng, seq):
    return seq[rng.randrange(len(seq))]


def noun_phrase(rng):
    r = rng.random()
    obj = pick(rng, OBJECTS)
    if r < 0.35:
        return f"the {obj}"
    if r < 0.7:
        return f"the {pick(rng, ADJECTIVES)} {obj}"
    if r < 0.85:
        return f"a {pick(rng, ADJECTIVES)} {obj}"
    return f"{pick(rng, NAMES)}'s {obj}"


def clause(rng):
    who = pick(rng, NAMES)
    r = rng.random()
    if r < 0.4:
        verb = pick(rng, VERBS_T)[0]
        s = f"{who} {verb} {noun_phrase(rng)}"
    elif r < 0.65:
        verb = pick(rng, VERBS_I)[0]
        s = f"{who} {verb} to {pick(rng, PLACES)}"
    elif r < 0.8:
        s = f"{who} was {pick(rng, FEELINGS)}"
    else:
        verb = pick(rng, VERBS_T)[1]
        s = f"{who} wanted to {verb} {noun_phrase(rng)}"
    if rng.random() < 0.35:
        s += " " + pick(rng, ADVERBS)
    return s


def sentence(rng):
    r = rng.random()
    if r < 0.12:
        return pick(rng, WEATHER) + "."
    if r < 0.27:
        who = pick(rng, NAMES)
        said = pick(rng, ["said", "asked", "whispered", "called", "answered"])
        line = pick(rng, SAYINGS)
        end = "?" if said == "asked" or line.startswith("Do ") else "."
        return f"\"{line}{end}\" {said} {who}."
    if r < 0.55:
        c1 = clause(rng)
        c2 = clause(rng)
        return f"{c1[0].upper()}{c1[1:]} {pick(rng, CONNECTORS)} {c2}."
    if r < 0.65:
        place = pick(rng, PLACES)
        return f"At {place} there was {noun_phrase(rng)}, and nobody knew who had left it there."
    if r < 0.72:
        n = rng.randint(2, 12)
        return f"It took {n} days to {pick(rng, VERBS_T)[1]} {noun_phrase(rng)}."
    c = clause(rng)
    return c[0].upper() + c[1:] + "."


def paragraph(rng):
    n = rng.randint(3, 9)
    text = " ".join(sentence(rng) for _ in range(n))
    return textwrap.fill(text, width=72)


def chapter_title(rng, k):
    return f"CHAPTER {k}\n\n{pick(rng, ['The', 'A'])} {pick(rng, ADJECTIVES).title()} {pick(rng, OBJECTS).title()}"


def main():
    rng = random.Random(SEED)
    out = []
    size = 0
    chapter = 1
    while size < TARGET_BYTES:
        block = [chapter_title(rng, chapter)]
        for _ in range(rng.randint(12, 24)):
            block.append(paragraph(rng))
        text = "\n\n".join(block) + "\n\n\n"
        out.append(text)
        size += len(text.encode("utf-8"))
        chapter += 1
    sys.stdout.write("".join(out))


if __name__ == "__main__":
    main()
