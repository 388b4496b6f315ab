#!/usr/bin/env python3
"""Writes a small templated multiple-choice corpus in the jsonl input format.

Each file asks "which of these is a <category>?" over a different slice of
categories; the target shares categories with the first source only.
"""
import argparse
import json
import pathlib
import random

CATEGORIES = {
    "fruit": ["apple", "banana", "cherry", "grape", "mango", "pear", "plum", "peach"],
    "tool": ["hammer", "wrench", "saw", "drill", "chisel", "pliers", "shovel", "rake"],
    "animal": ["horse", "tiger", "rabbit", "eagle", "salmon", "camel", "otter", "moose"],
    "vehicle": ["truck", "bicycle", "train", "canoe", "tractor", "scooter", "tram", "yacht"],
    "instrument": ["violin", "drum", "flute", "trumpet", "piano", "cello", "banjo", "harp"],
    "color": ["red", "blue", "green", "purple", "orange", "yellow", "teal", "maroon"],
}

SPLITS = {
    "source_food_tools": ["fruit", "tool"],
    "source_animals": ["animal", "vehicle"],
    "source_music": ["instrument", "color"],
    "target_train": ["fruit", "tool"],
    "target_dev": ["fruit", "tool"],
}
SIZES = {"target_train": 60, "target_dev": 200}


def record(rng, asked, pool):
    gold = rng.choice(CATEGORIES[asked])
    others = [w for c in pool if c != asked for w in CATEGORIES[c]]
    cands = rng.sample(others, 3) + [gold]
    rng.shuffle(cands)
    return {
        "context": "",
        "question": f"which of these is a {asked}?",
        "candidates": cands,
        "label": cands.index(gold),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/toy")
    ap.add_argument("--size", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    pool = list(CATEGORIES)
    for name, asked in SPLITS.items():
        with open(out / f"{name}.jsonl", "w") as f:
            for _ in range(SIZES.get(name, args.size)):
                f.write(json.dumps(record(rng, rng.choice(asked), pool)) + "\n")


if __name__ == "__main__":
    main()
