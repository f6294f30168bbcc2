"""Tokenization, datasets, batching, and persisted index splits.

The default tokenizer is byte-level: 256 byte values plus PAD/BOS/EOS give a
259-id vocabulary, and encode/decode round-trips any text exactly. A
word-level tokenizer backed by an explicit vocabulary file serves the
synthetic desk-scale pipeline, where per-word gate statistics are the point.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, InvalidArgument

log = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
N_SPECIALS = 3
_SPECIAL_SURFACES = {PAD_ID: "<pad>", BOS_ID: "<bos>", EOS_ID: "<eos>"}


class ByteTokenizer:
    """Byte-level tokenizer: id = byte value + 3, plus the three specials."""

    vocab_size = 256 + N_SPECIALS

    def encode(self, text: str) -> np.ndarray:
        body = [b + N_SPECIALS for b in text.encode("utf-8")]
        return np.array([BOS_ID] + body + [EOS_ID], dtype=np.int64)

    def decode(self, ids) -> str:
        payload = bytes(int(i) - N_SPECIALS for i in ids if int(i) >= N_SPECIALS)
        return payload.decode("utf-8")

    def token_surface(self, token_id: int) -> str:
        token_id = int(token_id)
        if token_id in _SPECIAL_SURFACES:
            return _SPECIAL_SURFACES[token_id]
        if not (N_SPECIALS <= token_id < self.vocab_size):
            raise InvalidArgument(f"token id {token_id} out of range")
        return bytes([token_id - N_SPECIALS]).decode("latin-1")


class WordTokenizer:
    """Whitespace tokenizer over an explicit vocabulary file (one word per line)."""

    def __init__(self, words: list[str]):
        if len(set(words)) != len(words):
            raise DataFormatError("vocabulary contains duplicate words")
        self.words = list(words)
        self._ids = {w: i + N_SPECIALS for i, w in enumerate(words)}
        self.vocab_size = len(words) + N_SPECIALS

    @classmethod
    def from_file(cls, path: str) -> "WordTokenizer":
        try:
            with open(path, "r", encoding="utf-8") as f:
                words = [line.rstrip("\n") for line in f if line.strip()]
        except FileNotFoundError as e:
            raise DataFormatError(f"vocabulary file not found: {path}") from e
        return cls(words)

    def encode(self, text: str) -> np.ndarray:
        body = []
        for word in text.split():
            if word not in self._ids:
                raise DataFormatError(f"word not in vocabulary: {word!r}")
            body.append(self._ids[word])
        return np.array([BOS_ID] + body + [EOS_ID], dtype=np.int64)

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i) - N_SPECIALS] for i in ids if int(i) >= N_SPECIALS)

    def token_surface(self, token_id: int) -> str:
        token_id = int(token_id)
        if token_id in _SPECIAL_SURFACES:
            return _SPECIAL_SURFACES[token_id]
        if not (N_SPECIALS <= token_id < self.vocab_size):
            raise InvalidArgument(f"token id {token_id} out of range")
        return self.words[token_id - N_SPECIALS]


def load_tokenizer(vocab_path: str | None):
    return WordTokenizer.from_file(vocab_path) if vocab_path else ByteTokenizer()


# -- batches -------------------------------------------------------------------


@dataclass
class Batch:
    """One training batch.

    `modality` is "text_only", "image_caption", or "mixed". Mixed batches come
    from the single-loader curriculum: `image_rows` marks which rows carry a
    real image; the rest have zero-filled embeddings and follow the text path.
    """

    token_ids: np.ndarray          # (B, T) int64
    pad_mask: np.ndarray           # (B, T) bool, True where the token is real
    modality: str
    image_embedding: np.ndarray | None = None   # (B, image_dim) float
    image_rows: np.ndarray | None = None         # (B,) bool, mixed batches only


def validate_batch(batch: Batch) -> None:
    ids, mask = batch.token_ids, batch.pad_mask
    if ids.shape != mask.shape or ids.ndim != 2:
        raise InvalidArgument(f"batch shapes inconsistent: {ids.shape} vs {mask.shape}")
    if batch.modality not in ("text_only", "image_caption", "mixed"):
        raise InvalidArgument(f"unknown modality {batch.modality!r}")
    if (ids[:, 0] != BOS_ID).any():
        raise InvalidArgument("every row must begin with BOS")
    if ((ids == PAD_ID) == mask).any():
        raise InvalidArgument("pad_mask must be False exactly at PAD positions")
    # EOS precedes padding: the last real token of every row is EOS.
    lengths = mask.sum(axis=1)
    last = ids[np.arange(ids.shape[0]), lengths - 1]
    if (last != EOS_ID).any():
        raise InvalidArgument("every row must close with EOS before any padding")
    if batch.modality == "image_caption" and batch.image_embedding is None:
        raise InvalidArgument("image_caption batches need image embeddings")
    if batch.modality == "mixed":
        if batch.image_embedding is None or batch.image_rows is None:
            raise InvalidArgument("mixed batches need image embeddings and an image_rows mask")
    if batch.image_embedding is not None and batch.image_embedding.shape[0] != ids.shape[0]:
        raise InvalidArgument("image embedding rows must match the batch size")


def collate(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad variable-length id sequences with PAD; returns (ids, pad_mask)."""
    if not seqs:
        raise InvalidArgument("cannot collate an empty list")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
        mask[r, :len(s)] = True
    return ids, mask


def text_batch(seqs: list[np.ndarray]) -> Batch:
    ids, mask = collate(seqs)
    return Batch(ids, mask, "text_only")


def caption_batch(seqs: list[np.ndarray], embeddings: np.ndarray) -> Batch:
    ids, mask = collate(seqs)
    return Batch(ids, mask, "image_caption", image_embedding=embeddings)


def mixed_batch(seqs: list[np.ndarray], embeddings: np.ndarray,
                image_rows: np.ndarray) -> Batch:
    ids, mask = collate(seqs)
    image_rows = np.asarray(image_rows, dtype=bool)
    if image_rows.all():
        return Batch(ids, mask, "image_caption", image_embedding=embeddings)
    if not image_rows.any():
        return Batch(ids, mask, "text_only")
    return Batch(ids, mask, "mixed", image_embedding=embeddings, image_rows=image_rows)


# -- datasets ------------------------------------------------------------------


def load_text_corpus(path: str, tokenizer, max_seq_len: int) -> list[np.ndarray]:
    """One sample per non-empty line, framed with BOS/EOS, truncated to fit."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line.rstrip("\n") for line in f]
    except FileNotFoundError as e:
        raise DataFormatError(f"corpus file not found: {path}") from e
    samples = []
    truncated = 0
    budget = max_seq_len - 2
    for line in lines:
        if not line.strip():
            continue
        ids = tokenizer.encode(line)
        if len(ids) - 2 > budget:
            ids = np.concatenate([ids[:1 + budget], ids[-1:]])
            truncated += 1
        samples.append(ids)
    if truncated:
        log.info("truncated %d of %d corpus lines to %d content tokens",
                 truncated, len(samples), budget)
    if not samples:
        raise DataFormatError(f"corpus {path} has no usable lines")
    return samples


@dataclass
class CaptionDataset:
    """Tokenized captions paired with rows of an embedding matrix."""

    token_seqs: list[np.ndarray]
    image_indices: np.ndarray     # (N,) int, row into `embeddings`
    embeddings: np.ndarray        # (count, dim) float32

    def __post_init__(self):
        if len(self.token_seqs) != len(self.image_indices):
            raise InvalidArgument("each caption needs exactly one image index")
        if len(self.image_indices) and (
                self.image_indices.min() < 0
                or self.image_indices.max() >= self.embeddings.shape[0]):
            raise DataFormatError("caption image_index outside the embeddings file")

    def __len__(self):
        return len(self.token_seqs)

    def batch(self, indices) -> Batch:
        seqs = [self.token_seqs[i] for i in indices]
        rows = self.embeddings[self.image_indices[np.asarray(indices)]]
        return caption_batch(seqs, rows)


def load_caption_records(path: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            records = json.load(f)
    except FileNotFoundError as e:
        raise DataFormatError(f"captions file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"captions file {path} is not valid JSON: {e}") from e
    if not isinstance(records, list):
        raise DataFormatError("captions file must hold a JSON array")
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "caption" not in rec or "image_index" not in rec:
            raise DataFormatError(f"caption record {i} must have 'caption' and 'image_index'")
    return records


def load_caption_dataset(captions_path: str, embeddings: np.ndarray, tokenizer,
                         max_seq_len: int) -> CaptionDataset:
    records = load_caption_records(captions_path)
    seqs = []
    truncated = 0
    budget = max_seq_len - 2
    for rec in records:
        ids = tokenizer.encode(rec["caption"])
        if len(ids) - 2 > budget:
            ids = np.concatenate([ids[:1 + budget], ids[-1:]])
            truncated += 1
        seqs.append(ids)
    if truncated:
        log.info("truncated %d of %d captions", truncated, len(seqs))
    indices = np.array([int(rec["image_index"]) for rec in records], dtype=np.int64)
    return CaptionDataset(seqs, indices, embeddings)


# -- persisted splits ----------------------------------------------------------


@dataclass
class DataSplit:
    dataset: str
    seed: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def make_split(n: int, dataset: str, seed: int, validation_fraction: float = 0.1,
               test_fraction: float = 0.1) -> DataSplit:
    """Shuffle indices 0..n-1 and cut train/validation/test partitions."""
    from .rng import RngPool
    perm = RngPool(seed).stream(f"split/{dataset}").permutation(n)
    n_val = int(round(n * validation_fraction))
    n_test = int(round(n * test_fraction))
    n_train = n - n_val - n_test
    if n_train <= 0:
        raise InvalidArgument(f"split leaves no training data (n={n})")
    return DataSplit(dataset, seed,
                     train=np.sort(perm[:n_train]),
                     validation=np.sort(perm[n_train:n_train + n_val]),
                     test=np.sort(perm[n_train + n_val:]))


def save_split(path: str, split: DataSplit) -> None:
    parts = [f"# gatefuse-split dataset={split.dataset} seed={split.seed}\n"]
    for section, idx in (("train", split.train), ("validation", split.validation),
                         ("test", split.test)):
        parts.append(f"[{section}]\n")
        parts.extend(f"{int(i)}\n" for i in idx)
    with open(path, "w", encoding="utf-8") as f:
        f.write("".join(parts))


def load_split(path: str) -> DataSplit:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except FileNotFoundError as e:
        raise DataFormatError(f"split file not found: {path}") from e
    if not lines or not lines[0].startswith("# gatefuse-split "):
        raise DataFormatError(f"{path} is not a split file")
    header = dict(kv.split("=", 1) for kv in lines[0].removeprefix("# gatefuse-split ").split()
                  if "=" in kv)
    if "dataset" not in header or "seed" not in header:
        raise DataFormatError(f"split file {path} header lacks dataset= or seed=")
    sections: dict[str, list[int]] = {}
    current: list[int] | None = None
    for line in lines[1:]:
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], [])
        elif current is None:
            raise DataFormatError(f"index outside any section in {path}")
        else:
            try:
                current.append(int(line))
            except ValueError as e:
                raise DataFormatError(f"bad index line in {path}: {line!r}") from e
    missing = {"train", "validation", "test"} - set(sections)
    if missing:
        raise DataFormatError(f"split file {path} lacks sections: {sorted(missing)}")
    try:
        seed = int(header["seed"])
    except ValueError as e:
        raise DataFormatError(f"split file {path} has non-integer seed") from e
    return DataSplit(header["dataset"], seed,
                     train=np.array(sections["train"], dtype=np.int64),
                     validation=np.array(sections["validation"], dtype=np.int64),
                     test=np.array(sections["test"], dtype=np.int64))
