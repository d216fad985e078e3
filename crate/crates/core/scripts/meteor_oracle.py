"""Reference unigram F-mean for the relevance fixtures.

Counts matches as a multiset intersection of canonical tokens and stores
the counts next to the pair, so the test can recompute 10PR/(R+9P) by hand.
Usage: python3 meteor_oracle.py fixtures.json
"""
import json
import sys
import unicodedata
from collections import Counter


def tokens(text):
    text = unicodedata.normalize("NFC", text).lower()
    out = []
    for raw in text.split():
        i, j = 0, len(raw)
        while i < j and not raw[i].isalnum():
            i += 1
        while j > i and not raw[j - 1].isalnum():
            j -= 1
        if i < j:
            out.append(raw[i:j])
    return out


def main(path):
    with open(path) as f:
        fixtures = json.load(f)
    for fx in fixtures:
        ref, cand = tokens(fx["reference"]), tokens(fx["candidate"])
        m = sum((Counter(ref) & Counter(cand)).values())
        fx["matches"], fx["reference_len"], fx["candidate_len"] = m, len(ref), len(cand)
        if m == 0:
            fx["expected"] = 0.0
        else:
            p, r = m / len(cand), m / len(ref)
            fx["expected"] = 10 * p * r / (r + 9 * p)
    with open(path, "w") as f:
        json.dump(fixtures, f, indent=2, ensure_ascii=False)
        f.write("\n")


if __name__ == "__main__":
    main(sys.argv[1])
