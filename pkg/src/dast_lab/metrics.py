"""Caption metrics and clinical-efficacy scoring.

BLEU-1..4 (corpus-level, add-1 smoothing on zero counts for orders >= 2),
ROUGE-L (per-pair LCS F-measure, averaged), CIDEr (TF-IDF weighted n-gram
cosine, n = 1..4, x10), plus a rule-based 14-category labeler whose phrase
inventory matches the synthetic report templates, scored with positive-class
precision/recall/F1 in both macro and micro form.

Tokenization here is the same word/punctuation splitter the generator uses.
"""

from __future__ import annotations

import math
from collections import Counter
from enum import Enum

from .generator import split_words
from .ontology import CATEGORIES, FINDING_PHRASES, NEGATION_CUES, NUM_CATEGORIES

NEGATION_WINDOW = 5


class Corpus:
    """Aligned hypothesis/reference texts keyed by unique study id."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        ids = [sid for sid, _, _ in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate study ids in corpus")
        if not self.pairs:
            raise ValueError("empty corpus")

    @staticmethod
    def from_maps(hypotheses, references):
        if set(hypotheses) != set(references):
            missing = set(hypotheses) ^ set(references)
            raise ValueError(f"hypothesis/reference keys disagree: {sorted(missing)[:5]}")
        return Corpus([(sid, hypotheses[sid], references[sid])
                       for sid in sorted(hypotheses)])

    def tokenized(self):
        return [(split_words(h), split_words(r)) for _, h, r in self.pairs]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(corpus, n):
    """Corpus-level BLEU with uniform weights over orders 1..n."""
    if not 1 <= n <= 4:
        raise ValueError("BLEU order must be in 1..4")
    pairs = corpus.tokenized()
    hyp_len = sum(len(h) for h, _ in pairs)
    ref_len = sum(len(r) for _, r in pairs)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        matches = 0
        total = 0
        for hyp, ref in pairs:
            hc, rc = _ngrams(hyp, order), _ngrams(ref, order)
            matches += sum(min(c, rc[g]) for g, c in hc.items())
            total += sum(hc.values())
        if order >= 2 and matches == 0:
            matches, total = matches + 1, total + 1  # add-1 smoothing
        if matches == 0 or total == 0:
            return 0.0
        log_sum += math.log(matches / total) / n
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_sum)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(corpus, beta=1.0):
    """Mean per-pair LCS F-measure (F1 at the default beta)."""
    scores = []
    for hyp, ref in corpus.tokenized():
        if not hyp or not ref:
            scores.append(0.0)
            continue
        lcs = _lcs_length(hyp, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, r = lcs / len(hyp), lcs / len(ref)
        scores.append((1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return sum(scores) / len(scores)


def cider(corpus):
    """TF-IDF n-gram cosine, n = 1..4, averaged then scaled by 10.

    idf = log(M / df) over the reference set; n-grams absent from every
    reference carry zero weight, which keeps the score exactly invariant
    under corpus duplication.
    """
    pairs = corpus.tokenized()
    m = len(pairs)
    if m < 2:
        raise ValueError("CIDEr needs a corpus of at least 2 studies for idf")
    df = [Counter() for _ in range(4)]
    for _, ref in pairs:
        for order in range(1, 5):
            df[order - 1].update(set(_ngrams(ref, order)))

    def weighted(counts, order):
        out = {}
        for gram, tf in counts.items():
            d = df[order - 1].get(gram, 0)
            if d > 0:
                out[gram] = tf * math.log(m / d)
        return out

    total = 0.0
    for hyp, ref in pairs:
        per_order = 0.0
        for order in range(1, 5):
            wh = weighted(_ngrams(hyp, order), order)
            wr = weighted(_ngrams(ref, order), order)
            dot = sum(v * wr.get(g, 0.0) for g, v in wh.items())
            nh = math.sqrt(sum(v * v for v in wh.values()))
            nr = math.sqrt(sum(v * v for v in wr.values()))
            per_order += dot / (nh * nr) if nh > 0 and nr > 0 else 0.0
        total += per_order / 4.0
    return 10.0 * total / m


# -- clinical efficacy ----------------------------------------------------------------


class Label(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    ABSENT = "absent"


_PHRASE_TOKENS = [tuple(p.split()) for p in FINDING_PHRASES]


def _negated_at(tokens, start):
    window = tokens[max(0, start - NEGATION_WINDOW):start]
    for cue in NEGATION_CUES:
        for i in range(len(window) - len(cue) + 1):
            if tuple(window[i:i + len(cue)]) == cue:
                return True
    return False


def extract_labels(report):
    """Keyword labeler: any unnegated mention is positive, else negated
    mentions read negative, else the category is absent."""
    tokens = split_words(report)
    out = []
    for phrase in _PHRASE_TOKENS:
        positive = negative = False
        for i in range(len(tokens) - len(phrase) + 1):
            if tuple(tokens[i:i + len(phrase)]) != phrase:
                continue
            if _negated_at(tokens, i):
                negative = True
            else:
                positive = True
        if positive:
            out.append(Label.POSITIVE)
        elif negative:
            out.append(Label.NEGATIVE)
        else:
            out.append(Label.ABSENT)
    return out


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def clinical_prf(hyp_labels, ref_labels):
    """Positive-class P/R/F1 per category plus macro and micro aggregates.

    hyp_labels / ref_labels: study_id -> list of 14 Label values. Anything
    other than POSITIVE counts as non-positive.
    """
    if set(hyp_labels) != set(ref_labels):
        raise ValueError("hypothesis/reference study keys disagree")
    counts = [[0, 0, 0] for _ in range(NUM_CATEGORIES)]  # tp, fp, fn
    for sid in hyp_labels:
        for d in range(NUM_CATEGORIES):
            hyp_pos = hyp_labels[sid][d] == Label.POSITIVE
            ref_pos = ref_labels[sid][d] == Label.POSITIVE
            if hyp_pos and ref_pos:
                counts[d][0] += 1
            elif hyp_pos:
                counts[d][1] += 1
            elif ref_pos:
                counts[d][2] += 1
    per_category = {}
    for d, name in enumerate(CATEGORIES):
        p, r, f = _prf(*counts[d])
        per_category[name] = {"precision": p, "recall": r, "f1": f}
    macro = {k: sum(per_category[n][k] for n in CATEGORIES) / NUM_CATEGORIES
             for k in ("precision", "recall", "f1")}
    tp, fp, fn = (sum(c[i] for c in counts) for i in range(3))
    mp, mr, mf = _prf(tp, fp, fn)
    micro = {"precision": mp, "recall": mr, "f1": mf}
    return {"per_category": per_category, "macro": macro, "micro": micro}


def nlg_report(corpus):
    """All text metrics in one dict (the metrics.json payload core)."""
    return {
        "bleu_1": bleu_n(corpus, 1),
        "bleu_2": bleu_n(corpus, 2),
        "bleu_3": bleu_n(corpus, 3),
        "bleu_4": bleu_n(corpus, 4),
        "rouge_l": rouge_l(corpus),
        "cider": cider(corpus),
    }
