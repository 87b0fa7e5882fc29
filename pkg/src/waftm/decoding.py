"""Greedy and beam-search caption generation.

Beam scores are raw cumulative log-probabilities: no length normalization,
so with a large enough beam the search is exactly brute force, which the
tests exploit. [PAD] and [BOS] are never proposed as continuations; [UNK]
and [EOS] are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .tokenizer import BOS, EOS, PAD, TokenSeq


class DecodeError(ValueError):
    """Invalid decoding request (bad beam size or length bound)."""


@dataclass(frozen=True)
class Beam:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool

    def sort_key(self):
        return (-self.log_prob, self.tokens)


def _check_lengths(model: M.WaftmModel, max_len: int | None) -> int:
    if max_len is None:
        max_len = model.config.max_seq_len
    if not 1 <= max_len <= model.config.max_seq_len:
        raise DecodeError(
            f"max_len {max_len} outside [1, {model.config.max_seq_len}]"
        )
    return max_len


def _encode_features(model: M.WaftmModel, features, feature_valid):
    if feature_valid is None:
        feature_valid = [None] * model.config.n_modalities
    enc_outs = [
        M.encoder_forward(model, f, k, key_valid=feature_valid[k])
        for k, f in enumerate(features)
    ]
    return enc_outs, feature_valid


def _next_log_probs(model, tokens, enc_outs, feature_valid) -> np.ndarray:
    logits = M.decoder_forward(model, list(tokens), enc_outs,
                               enc_key_valid=feature_valid)
    row = T.log_softmax(logits, axis=-1).data[-1].copy()
    row[PAD] = -np.inf
    row[BOS] = -np.inf
    return row


def greedy_decode(model: M.WaftmModel, features, max_len: int | None = None,
                  feature_valid=None) -> TokenSeq:
    max_len = _check_lengths(model, max_len)
    with T.no_grad():
        enc_outs, feature_valid = _encode_features(model, features, feature_valid)
        tokens = [BOS]
        while len(tokens) < max_len:
            row = _next_log_probs(model, tokens, enc_outs, feature_valid)
            nxt = int(np.argmax(row))
            tokens.append(nxt)
            if nxt == EOS:
                break
    return TokenSeq(ids=tokens, length=len(tokens))


def beam_search(model: M.WaftmModel, features, beam_size: int,
                max_len: int | None = None,
                feature_valid=None) -> list[tuple[TokenSeq, float]]:
    if beam_size < 1:
        raise DecodeError(f"beam size must be >= 1, got {beam_size}")
    max_len = _check_lengths(model, max_len)
    with T.no_grad():
        enc_outs, feature_valid = _encode_features(model, features, feature_valid)
        beams = [Beam(tokens=(BOS,), log_prob=0.0, finished=max_len == 1)]
        while any(not b.finished for b in beams):
            candidates = [b for b in beams if b.finished]
            for beam in beams:
                if beam.finished:
                    continue
                row = _next_log_probs(model, beam.tokens, enc_outs, feature_valid)
                for tok in range(row.size):
                    if not np.isfinite(row[tok]):
                        continue
                    seq = beam.tokens + (tok,)
                    done = tok == EOS or len(seq) == max_len
                    candidates.append(
                        Beam(tokens=seq, log_prob=beam.log_prob + float(row[tok]),
                             finished=done)
                    )
            candidates.sort(key=Beam.sort_key)
            beams = candidates[:beam_size]
    return [
        (TokenSeq(ids=list(b.tokens), length=len(b.tokens)), b.log_prob)
        for b in sorted(beams, key=Beam.sort_key)
    ]


def sequence_log_prob(model: M.WaftmModel, features, token_ids,
                      feature_valid=None) -> T.Tensor:
    """Teacher-forced log-probability of a full sequence (starting at [BOS]).

    Differentiable: SCST recomputes beam log-probs through this path with
    gradient recording on.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size < 2 or ids[0] != BOS:
        raise DecodeError("sequence must start with [BOS] and contain a continuation")
    logits = M.model_forward(model, features, ids[:-1], feature_valid=feature_valid)
    logp = T.log_softmax(logits, axis=-1)
    return T.sum_(T.gather_last(logp, ids[1:]))
