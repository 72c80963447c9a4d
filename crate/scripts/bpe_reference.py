"""Reference byte-level BPE used to cross-check the Rust tokenizer.

Every merge step recounts all pairs from scratch. Ties between equally
frequent pairs go to the lexicographically smallest (left bytes, right bytes).
Prints the merges and the encoding of each argument as JSON.
"""
import json
import sys
from collections import Counter

BYTE_OFFSET = 108


def train(lines, vocab_size):
    words = Counter(l.encode() for l in lines if l)
    seqs = {w: [bytes([b]) for b in w] for w in words}
    merges = []
    n_tokens = 256
    while n_tokens + BYTE_OFFSET < vocab_size:
        pairs = Counter()
        for w, seq in seqs.items():
            for a, b in zip(seq, seq[1:]):
                pairs[(a, b)] += words[w]
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        if pairs[best] < 2:
            break
        merges.append(best)
        known = {bytes([b]) for b in range(256)} | {a + b for a, b in merges[:-1]}
        if best[0] + best[1] not in known:
            n_tokens += 1
        for w, seq in seqs.items():
            out, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                    out.append(seq[i] + seq[i + 1])
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[w] = out
    return merges


def token_ids(merges):
    ids = {bytes([b]): BYTE_OFFSET + b for b in range(256)}
    for a, b in merges:
        if a + b not in ids:
            ids[a + b] = BYTE_OFFSET + len(ids)
    return ids


def encode(text, merges, ids):
    rank = {}
    for i, m in enumerate(merges):
        rank.setdefault(m, i)
    seq = [bytes([b]) for b in text.encode()]
    while True:
        cands = [(rank[p], i) for i, p in enumerate(zip(seq, seq[1:])) if p in rank]
        if not cands:
            break
        r = min(cands)[0]
        a, b = merges[r]
        out, i = [], 0
        while i < len(seq):
            if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                out.append(a + b)
                i += 2
            else:
                out.append(seq[i])
                i += 1
        seq = out
    return [ids[t] for t in seq]


def main():
    corpus, vocab_size = sys.argv[1], int(sys.argv[2])
    with open(corpus, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    merges = train(lines, vocab_size)
    ids = token_ids(merges)
    out = {
        "n_merges": len(merges),
        "n_tokens": len(ids),
        "first_merges": [[ids[a], ids[b]] for a, b in merges[:8]],
        "encodings": {t: encode(t, merges, ids) for t in sys.argv[3:]},
    }
    print(json.dumps(out))


if __name__ == "__main__":
    main()
