"""Self-contained caption metrics: corpus BLEU-4, ROUGE-L, and CIDEr-D.

All metrics operate on plain text (decoded captions, not subword pieces).
Text is lowercased, punctuation is stripped, and words are split on
whitespace, so scores do not depend on the tokenizer in use.

CIDEr-D doubles as the reward for self-critical training; the idf table is
built once over a reference corpus where each video's reference set counts
as one document.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

NGRAM_MAX = 4
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


class MetricError(ValueError):
    pass


def caption_tokens(text: str) -> list[str]:
    return text.lower().translate(_PUNCT_TABLE).split()


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU-4


def bleu4(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU with clipped modified precisions up to 4-grams."""
    if not candidates:
        raise MetricError("bleu4: empty corpus")
    if len(candidates) != len(references) or any(not r for r in references):
        raise MetricError("bleu4: every candidate needs at least one reference")

    matched = [0] * NGRAM_MAX
    total = [0] * NGRAM_MAX
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        ctoks = caption_tokens(cand)
        rtoks = [caption_tokens(r) for r in refs]
        cand_len += len(ctoks)
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - len(ctoks)), len(r)) for r in rtoks)[1]
        for n in range(1, NGRAM_MAX + 1):
            counts = ngram_counts(ctoks, n)
            if not counts:
                continue
            max_ref = Counter()
            for r in rtoks:
                for gram, c in ngram_counts(r, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            matched[n - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())
            total[n - 1] += sum(counts.values())

    if any(t == 0 for t in total) or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / NGRAM_MAX
    brevity = math.exp(min(0.0, 1.0 - ref_len / cand_len)) if cand_len else 0.0
    return brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    beta: float = ROUGE_BETA,
) -> float:
    """Mean over the corpus of the best LCS F-score against any reference."""
    if not candidates:
        raise MetricError("rouge_l: empty corpus")
    if len(candidates) != len(references) or any(not r for r in references):
        raise MetricError("rouge_l: every candidate needs at least one reference")

    beta2 = beta * beta
    scores = []
    for cand, refs in zip(candidates, references):
        ctoks = caption_tokens(cand)
        best = 0.0
        for ref in refs:
            rtoks = caption_tokens(ref)
            lcs = _lcs_length(ctoks, rtoks)
            if lcs == 0:
                continue
            precision = lcs / len(ctoks)
            recall = lcs / len(rtoks)
            f = (1 + beta2) * recall * precision / (recall + beta2 * precision)
            best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr-D


@dataclass(frozen=True)
class IdfTable:
    """idf(g) = log(N / df(g)) where df counts reference *sets* containing g."""

    idf: dict[tuple, float] = field(repr=False)
    n_docs: int = 0
    video_ids: frozenset = frozenset()

    def lookup(self, gram: tuple) -> float:
        # an n-gram never seen in the corpus gets the maximal idf (df := 1)
        return self.idf.get(gram, math.log(self.n_docs))


def build_idf(references: Mapping[str, Sequence[str]]) -> IdfTable:
    n_docs = len(references)
    if n_docs < 2:
        raise MetricError("build_idf: degenerate idf, need at least 2 videos")
    df: Counter = Counter()
    for refs in references.values():
        grams: set = set()
        for ref in refs:
            toks = caption_tokens(ref)
            for n in range(1, NGRAM_MAX + 1):
                grams.update(ngram_counts(toks, n))
        df.update(grams)
    log_n = math.log(n_docs)
    idf = {gram: log_n - math.log(count) for gram, count in df.items()}
    return IdfTable(idf, n_docs, frozenset(references))


def _tfidf_vectors(tokens: Sequence[str], idf: IdfTable):
    """Per n: n-gram -> count * idf, plus the vector norms."""
    vecs = []
    norms = []
    for n in range(1, NGRAM_MAX + 1):
        vec = {
            gram: count * idf.lookup(gram)
            for gram, count in ngram_counts(tokens, n).items()
        }
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def _cider_d_pair(cand_tokens, ref_tokens, idf: IdfTable, sigma: float) -> float:
    cvecs, cnorms = _tfidf_vectors(cand_tokens, idf)
    rvecs, rnorms = _tfidf_vectors(ref_tokens, idf)
    penalty = math.exp(
        -((len(cand_tokens) - len(ref_tokens)) ** 2) / (2.0 * sigma * sigma)
    )
    total = 0.0
    for n in range(NGRAM_MAX):
        if cnorms[n] == 0.0 or rnorms[n] == 0.0:
            continue
        # clip candidate weights at the reference weight before the dot product
        dot = sum(
            min(w, rvecs[n][gram]) * rvecs[n][gram]
            for gram, w in cvecs[n].items()
            if gram in rvecs[n]
        )
        total += penalty * dot / (cnorms[n] * rnorms[n])
    return total / NGRAM_MAX


def cider_d_sentence(
    candidate: str,
    references: Sequence[str],
    idf: IdfTable,
    sigma: float = CIDER_SIGMA,
) -> float:
    """CIDEr-D for one candidate against its reference set, in [0, 10]."""
    ctoks = caption_tokens(candidate)
    score = sum(
        _cider_d_pair(ctoks, caption_tokens(r), idf, sigma) for r in references
    )
    return 10.0 * score / len(references)


def cider_d_scores(
    candidates: Mapping[str, str],
    references: Mapping[str, Sequence[str]],
    idf: IdfTable,
    sigma: float = CIDER_SIGMA,
) -> dict[str, float]:
    unknown = set(candidates) - idf.video_ids
    if unknown:
        raise MetricError(
            f"cider_d: video id(s) absent from idf corpus: {sorted(unknown)[:5]}"
        )
    return {
        vid: cider_d_sentence(cand, references[vid], idf, sigma)
        for vid, cand in candidates.items()
    }


def cider_d(
    candidates: Mapping[str, str],
    references: Mapping[str, Sequence[str]],
    idf: IdfTable,
    sigma: float = CIDER_SIGMA,
) -> float:
    if not candidates:
        raise MetricError("cider_d: empty corpus")
    scores = cider_d_scores(candidates, references, idf, sigma)
    return sum(scores.values()) / len(scores)


# ---------------------------------------------------------------------------
# aggregation


def score_all(
    candidates: Mapping[str, str],
    references: Mapping[str, Sequence[str]],
    idf: IdfTable | None = None,
) -> dict:
    """{"B@4", "R", "C", "M"}; METEOR is reported as "n/a" (not implemented)."""
    if not candidates:
        raise MetricError("score_all: empty candidate list")
    ids = sorted(candidates)
    missing = [v for v in ids if v not in references]
    if missing:
        raise MetricError(f"score_all: no references for video id(s) {missing[:5]}")
    cand_list = [candidates[v] for v in ids]
    ref_list = [list(references[v]) for v in ids]
    if idf is None:
        idf = build_idf(references)
    return {
        "B@4": bleu4(cand_list, ref_list),
        "R": rouge_l(cand_list, ref_list),
        "C": cider_d({v: candidates[v] for v in ids}, references, idf),
        "M": "n/a",
    }
