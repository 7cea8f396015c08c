#!/usr/bin/env python3
"""Regenerates data/fixtures/ deterministically.

olid_synth.tsv  200 labelled posts with A/B/C hierarchy
corpus.txt      unlabelled posts for MLM pretraining
solid_a.tsv     weak confidences for task A (average/std columns)
"""
import argparse
import pathlib
import random

CONS = "bdfgklmnprstvz"
VOWELS = "aeiou"


def word(rng, syllables):
    return "".join(rng.choice(CONS) + rng.choice(VOWELS) for _ in range(syllables))


def lexicon(rng, size, syllables=(2, 3)):
    out = set()
    while len(out) < size:
        out.add(word(rng, rng.randint(*syllables)))
    return sorted(out)


def post(rng, neutral, insults, groups, offensive):
    words = [rng.choice(neutral) for _ in range(rng.randint(5, 9))]
    labels = ("NOT", "NULL", "NULL")
    if offensive:
        words[rng.randrange(len(words))] = rng.choice(insults)
        kind = rng.random()
        if kind < 0.3:
            labels = ("OFF", "UNT", "NULL")
        elif kind < 0.65:
            words.insert(0, "@USER")
            labels = ("OFF", "TIN", "IND")
        elif kind < 0.9:
            words.insert(rng.randrange(len(words)), rng.choice(groups))
            labels = ("OFF", "TIN", "GRP")
        else:
            words.append("URL")
            labels = ("OFF", "TIN", "OTH")
    elif rng.random() < 0.3:
        words.insert(0, "@USER")
    return " ".join(words), labels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "fixtures"))
    ap.add_argument("--seed", type=int, default=2020)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    neutral = lexicon(rng, 120)
    insults = lexicon(rng, 16, (3, 3))
    groups = lexicon(rng, 6, (2, 2))

    rows = ["id\ttweet\tsubtask_a\tsubtask_b\tsubtask_c"]
    for i in range(200):
        text, (a, b, c) = post(rng, neutral, insults, groups, rng.random() < 0.4)
        rows.append(f"{10000 + i}\t{text}\t{a}\t{b}\t{c}")
    (out / "olid_synth.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    corpus = [post(rng, neutral, insults, groups, rng.random() < 0.4)[0] for _ in range(400)]
    (out / "corpus.txt").write_text("\n".join(corpus) + "\n", encoding="utf-8")

    solid = ["id\ttext\taverage\tstd"]
    for i in range(60):
        off = rng.random() < 0.4
        text, _ = post(rng, neutral, insults, groups, off)
        conf = min(1.0, max(0.0, rng.gauss(0.75 if off else 0.25, 0.1)))
        solid.append(f"s{i}\t{text}\t{conf:.6f}\t{rng.uniform(0.05, 0.2):.6f}")
    (out / "solid_a.tsv").write_text("\n".join(solid) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
