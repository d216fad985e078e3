"""Reference semantic similarity: mean of TF-IDF cosine and latent-space cosine.

Independent of the Rust implementation: the latent basis comes from a full
numpy SVD of the term x unit matrix instead of the Gram-matrix eigenproblem.
Usage: python3 semantic_similarity_oracle.py fixtures.json
"""
import json
import math
import sys
import unicodedata

import numpy as np

TERMINAL = ".!?"
CLOSERS = "\"')]”’"


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


def sentence_units(text):
    # boundary after terminal punctuation (+closers) followed by whitespace,
    # and after whitespace runs holding two or more newlines
    cuts = {0, len(text)}
    i, n = 0, len(text)
    while i < n:
        if text[i] in TERMINAL:
            j = i + 1
            while j < n and (text[j] in TERMINAL or text[j] in CLOSERS):
                j += 1
            if j < n and text[j].isspace():
                while j < n and text[j].isspace():
                    j += 1
                cuts.add(j)
            i = max(j, i + 1)
        else:
            i += 1
    i = 0
    while i < n:
        if text[i].isspace():
            j = i
            while j < n and text[j].isspace():
                j += 1
            if text[i:j].count("\n") >= 2:
                cuts.add(j)
            i = j
        else:
            i += 1
    cuts = sorted(cuts)
    units = []
    for a, b in zip(cuts, cuts[1:]):
        for line in text[a:b].splitlines():
            t = tokens(line)
            if t:
                units.append(t)
    return units


def similarity(doc, ext):
    corpus = sorted(sentence_units(doc) + sentence_units(ext))
    n = len(corpus)
    vocab = sorted({t for u in corpus for t in u})
    index = {t: i for i, t in enumerate(vocab)}
    df = {t: sum(1 for u in corpus if t in u) for t in vocab}
    idf = {t: math.log((1 + n) / (1 + df[t])) + 1 for t in vocab}
    unseen = math.log(1 + n) + 1

    def sparse(toks):
        tf = {}
        for t in toks:
            tf[t] = tf.get(t, 0) + 1
        return {t: c * idf.get(t, unseen) for t, c in tf.items()}

    a, b = sparse(tokens(doc)), sparse(tokens(ext))
    dot = sum(a[t] * b[t] for t in a if t in b)
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    tfidf = min(max(dot / (na * nb), 0.0), 1.0)

    d = np.zeros((len(vocab), n))
    for j, u in enumerate(corpus):
        for t, w in sparse(u).items():
            d[index[t], j] = w
    k = max(1, min(50, n - 1))
    u_mat, s, _ = np.linalg.svd(d, full_matrices=False)
    keep = [i for i in range(len(s)) if s[i] ** 2 > (s[0] ** 2) * 1e-12 and s[i] > 0][:k]
    basis = u_mat[:, keep]

    def dense(v):
        x = np.zeros(len(vocab))
        for t, w in v.items():
            if t in index:
                x[index[t]] = w
        return x

    pa, pb = basis.T @ dense(a), basis.T @ dense(b)
    na, nb = np.linalg.norm(pa), np.linalg.norm(pb)
    latent = 0.0 if na == 0 or nb == 0 else min(max(float(pa @ pb) / (na * nb), 0.0), 1.0)
    return (tfidf + latent) / 2


if __name__ == "__main__":
    fixtures = json.load(open(sys.argv[1]))
    for f in fixtures:
        f["expected"] = similarity(f["document"], f["extraction"])
        print(f"{f['expected']:.15f}  {f['label']}")
    json.dump(fixtures, open(sys.argv[1], "w"), indent=2, ensure_ascii=False)
    open(sys.argv[1], "a").write("\n")
