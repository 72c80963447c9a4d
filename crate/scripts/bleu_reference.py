"""Reference corpus BLEU-4 with the same smoothing as the Rust metric:
a zero clipped match count at n >= 2 becomes 1 / (total + 1)."""
import json
import math
import sys
from collections import Counter


def ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(cands, refs):
    m, t = [0] * 4, [0] * 4
    c_len = sum(map(len, cands))
    r_len = sum(map(len, refs))
    for c, r in zip(cands, refs):
        for n in range(1, 5):
            cc, rc = ngrams(c, n), ngrams(r, n)
            m[n - 1] += sum(min(v, rc[g]) for g, v in cc.items())
            t[n - 1] += max(len(c) - n + 1, 0)
    if c_len == 0 or m[0] == 0:
        return 0.0
    logp = sum(math.log(m[i] / t[i] if m[i] else 1 / (t[i] + 1)) for i in range(4)) / 4
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return 100 * bp * math.exp(logp)


if __name__ == "__main__":
    pairs = json.load(sys.stdin)
    cands = [c.lower().split() for c, _ in pairs]
    refs = [r.lower().split() for _, r in pairs]
    print(repr(bleu(cands, refs)))
