"""Independent brute-force oracles used to freeze expected metric values.

These deliberately avoid the package's own counting code: n-grams are
enumerated with explicit loops and clipping is done per n-gram, so a bug in
the library cannot hide in its own oracle.
"""

import math


def naive_ngram_list(tokens, n):
    out = []
    for i in range(len(tokens) - n + 1):
        out.append(tuple(tokens[i : i + n]))
    return out


def naive_clipped_matches(hyp, ref, n):
    hyp_grams = naive_ngram_list(hyp, n)
    ref_grams = naive_ngram_list(ref, n)
    matched = 0
    remaining = list(ref_grams)
    for g in hyp_grams:
        if g in remaining:
            matched += 1
            remaining.remove(g)
    return matched, len(hyp_grams)


def naive_bleu(stats_pairs, max_order=4, smoothing="none", k=1.0):
    """BLEU from a list of (hyp, ref) token-tuple pairs, pooled counts."""
    hyp_len = sum(len(h) for h, _ in stats_pairs)
    ref_len = sum(len(r) for _, r in stats_pairs)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_order + 1):
        matched = 0
        total = 0
        for hyp, ref in stats_pairs:
            m, t = naive_clipped_matches(hyp, ref, n)
            matched += m
            total += t
        if smoothing == "add_k" and n >= 2:
            p = (matched + k) / (total + k)
        else:
            p = matched / total if total > 0 else 0.0
        if p <= 0:
            return 0.0
        log_sum += math.log(p)
    if hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / max_order)


def naive_sentence_bleu(hyp, ref, max_order=4, smoothing="add_k", k=1.0):
    return naive_bleu([(tuple(hyp), tuple(ref))], max_order, smoothing, k)


def naive_average_ranks(values):
    """Rank by counting: 1 + #smaller + (#equal - 1)/2 for each element."""
    ranks = []
    for i, v in enumerate(values):
        smaller = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(1.0 + smaller + (equal - 1) / 2.0)
    return ranks


def naive_pearson(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def naive_spearman(a, b):
    return naive_pearson(naive_average_ranks(a), naive_average_ranks(b))
