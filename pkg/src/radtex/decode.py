"""Left-to-right caption generation: greedy and beam search over forward-decoder log-probs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model.captioner import CaptioningModel, encode_image
from .tensor import log_softmax_np
from .textpipe import EOS_ID, SOS_ID, detokenize, normalize

StepFn = Callable[[Sequence[int]], np.ndarray]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool = False


def greedy_core(step: StepFn, max_len: int, sos: int = SOS_ID, eos: int = EOS_ID) -> Hypothesis:
    """Append the argmax token (lowest id on ties) until ``eos`` or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be positive")
    seq, score = [sos], 0.0
    while len(seq) < max_len:
        lp = step(seq)
        tok = int(np.argmax(lp))
        score += float(lp[tok])
        seq.append(tok)
        if tok == eos:
            return Hypothesis(tuple(seq), score, True)
    return Hypothesis(tuple(seq), score, False)


def _better(a: Hypothesis, b: Hypothesis | None) -> bool:
    return b is None or a.logprob > b.logprob


def beam_core(step: StepFn, beams: int, max_len: int, sos: int = SOS_ID, eos: int = EOS_ID) -> Hypothesis:
    """Length-unnormalized beam search.

    Finished hypotheses stay in the pool and compete with extensions but are
    never extended.  A prefix that reaches ``max_len`` is terminal.  The
    result is the best terminal hypothesis ever admitted to the pool.
    """
    if beams < 1:
        raise ValueError("beams must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be positive")
    pool = [(Hypothesis((sos,), 0.0), max_len == 1)]
    best = pool[0][0] if max_len == 1 else None
    while not all(done for _, done in pool):
        cands: list[tuple[Hypothesis, bool]] = []
        cand_lp = []
        for h, done in pool:
            if done:
                cands.append((h, True))
                cand_lp.append(np.inf)
                continue
            lp = step(list(h.tokens))
            at_cap = len(h.tokens) + 1 >= max_len
            for tok in range(lp.shape[0]):
                cands.append((Hypothesis(h.tokens + (tok,), h.logprob + float(lp[tok]), tok == eos),
                              tok == eos or at_cap))
                cand_lp.append(float(lp[tok]))
        scores = np.array([h.logprob for h, _ in cands])
        # rank by total, then by the step's own log-prob, then by pool/token order
        order = np.lexsort((np.arange(len(cands)), -np.asarray(cand_lp), -scores))[:beams]
        pool = [cands[i] for i in order]
        for h, done in pool:
            if done and _better(h, best):
                best = h
    return best


def sequence_logprob(step: StepFn, tokens: Sequence[int]) -> float:
    """Cumulative log-prob of ``tokens[1:]`` given its prefixes, summed left to right."""
    score = 0.0
    for t in range(1, len(tokens)):
        score += float(step(list(tokens[:t]))[tokens[t]])
    return score


# ---------------------------------------------------------------------------
# model-backed decoding


def model_step(model: CaptioningModel, image: np.ndarray) -> StepFn:
    """Next-token log-probs from the forward decoder for one image, eval mode, no recording."""
    model.eval()
    with T.no_grad():
        visual = encode_image(model, np.asarray(image)[None])

    def step(prefix: Sequence[int]) -> np.ndarray:
        with T.no_grad():
            logits = model.textual(np.asarray(prefix, dtype=np.int64)[None], visual, "forward")
        return log_softmax_np(logits.data[0, -1].astype(np.float64))

    return step


def _cap(model: CaptioningModel, max_len: int | None) -> int:
    cap = model.max_caption_len if max_len is None else max_len
    if cap > model.cfg.textual.max_positions:
        raise ValueError(f"max_len {cap} exceeds {model.cfg.textual.max_positions} positions")
    return cap


def greedy_decode(model: CaptioningModel, image: np.ndarray, max_len: int | None = None) -> Hypothesis:
    return greedy_core(model_step(model, image), _cap(model, max_len))


def beam_search(model: CaptioningModel, image: np.ndarray, beams: int = 2, max_len: int | None = None,
                keep_greedy: bool = True) -> Hypothesis:
    """Beam search; with ``keep_greedy`` the greedy path also competes, so the result never scores below it."""
    step = model_step(model, image)
    cap = _cap(model, max_len)
    found = beam_core(step, beams, cap)
    if keep_greedy and beams > 1:
        greedy = greedy_core(step, cap)
        if greedy.logprob > found.logprob:
            return greedy
    return found


def generate_report(model: CaptioningModel, image: np.ndarray, beams: int = 2, max_len: int | None = None) -> str:
    if model.vocab is None:
        raise ValueError("model carries no vocabulary")
    hyp = beam_search(model, image, beams, max_len)
    return detokenize(hyp.tokens, model.vocab)


def same_caption(generated: str, reference: str) -> bool:
    """Exact match after the text normalization used for training."""
    return normalize(generated) == normalize(reference)
