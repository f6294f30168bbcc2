"""Scoring: sequence log-probabilities, minimal pairs, and image-conditioned
forced choice.

Log-probabilities are raw sums over scored positions (no length
normalization unless asked). Every scorer runs in eval mode and consumes no
randomness. Ties never count as correct.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Batch, caption_batch, text_batch
from .errors import DataFormatError, InvalidArgument

log = logging.getLogger(__name__)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_logprob(model, token_ids: np.ndarray, image_embedding: np.ndarray | None = None,
                     length_normalize: bool = False) -> float:
    """Sum of log p(token_t | tokens_<t) over every real token after BOS.

    `token_ids` is a single framed sequence (BOS ... EOS). With an image
    embedding the sequence is scored under image conditioning.
    """
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    if ids.shape[1] < 2:
        raise InvalidArgument("need at least BOS plus one token to score")
    if image_embedding is not None:
        batch = caption_batch([ids[0]], np.asarray(image_embedding).reshape(1, -1))
    else:
        batch = text_batch([ids[0]])
    with T.inference_mode():
        trace = model.forward(batch)
    lp = _log_softmax(trace.logits.data[0].astype(np.float64))
    targets = ids[0, 1:]
    mask = batch.pad_mask[0, 1:]
    scores = lp[np.arange(len(targets)), targets][mask]
    total = float(scores.sum())
    return total / len(scores) if length_normalize else total


def load_minimal_pairs(path: str) -> list[dict]:
    """JSONL of {good, bad, subtask?} records."""
    records = _load_jsonl(path)
    for i, rec in enumerate(records):
        if "good" not in rec or "bad" not in rec:
            raise DataFormatError(f"minimal pair {i} in {path} needs 'good' and 'bad'")
    return records


def load_forced_choice(path: str) -> list[dict]:
    """JSONL of {image_index, candidates, correct, prefix?} records."""
    records = _load_jsonl(path)
    for i, rec in enumerate(records):
        for key in ("image_index", "candidates", "correct"):
            if key not in rec:
                raise DataFormatError(f"forced-choice item {i} in {path} lacks {key!r}")
        if not (0 <= int(rec["correct"]) < len(rec["candidates"])):
            raise DataFormatError(f"forced-choice item {i}: correct index out of range")
        if len(rec["candidates"]) < 2:
            raise DataFormatError(f"forced-choice item {i} needs at least 2 candidates")
    return records


def _load_jsonl(path: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
    except FileNotFoundError as e:
        raise DataFormatError(f"suite file not found: {path}") from e
    records = []
    for i, line in enumerate(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path} line {i + 1} is not valid JSON") from e
        if not isinstance(rec, dict):
            raise DataFormatError(f"{path} line {i + 1} must hold a JSON object")
        records.append(rec)
    if not records:
        raise DataFormatError(f"suite file {path} is empty")
    return records


@dataclass
class SuiteResult:
    accuracy: float
    n_items: int
    per_subtask: dict[str, tuple[float, int]]


def minimal_pair_accuracy(model, pairs: list[dict], tokenizer) -> SuiteResult:
    """Fraction of pairs where the good variant scores strictly higher."""
    if not pairs:
        raise InvalidArgument("no pairs to score")
    correct_total = 0
    by_task: dict[str, list[bool]] = {}
    for rec in pairs:
        good = sequence_logprob(model, tokenizer.encode(rec["good"]))
        bad = sequence_logprob(model, tokenizer.encode(rec["bad"]))
        hit = good > bad
        correct_total += hit
        by_task.setdefault(rec.get("subtask", "all"), []).append(hit)
    per_subtask = {task: (float(np.mean(flags)), len(flags))
                   for task, flags in sorted(by_task.items())}
    return SuiteResult(accuracy=correct_total / len(pairs), n_items=len(pairs),
                       per_subtask=per_subtask)


def forced_choice_accuracy(model, items: list[dict], embeddings: np.ndarray,
                           tokenizer) -> SuiteResult:
    """Image-conditioned choice: the correct candidate must be the unique argmax.

    An optional per-item question prefix is prepended to every candidate; it
    shifts all scores equally, so only the candidates decide the argmax.
    """
    if not items:
        raise InvalidArgument("no items to score")
    hits = 0
    for rec in items:
        idx = int(rec["image_index"])
        if not (0 <= idx < embeddings.shape[0]):
            raise DataFormatError(f"forced-choice image_index {idx} outside embeddings")
        emb = embeddings[idx]
        prefix = rec.get("prefix", "")
        texts = [f"{prefix} {c}".strip() if prefix else c for c in rec["candidates"]]
        scores = [sequence_logprob(model, tokenizer.encode(t), image_embedding=emb)
                  for t in texts]
        best = max(scores)
        winners = [i for i, s in enumerate(scores) if s == best]
        hits += winners == [int(rec["correct"])]
    return SuiteResult(accuracy=hits / len(items), n_items=len(items), per_subtask={})
