"""Self-contained synthetic corpus for end-to-end runs and tests.

Every caption is a deterministic readout of its image embedding: each word
slot takes the argmax over a fixed slice of the vector, so a model can reach
near-zero caption loss only by actually using the image stream. All outputs
are byte-stable functions of the seed.
"""

from __future__ import annotations

import json
import logging
import os

import numpy as np

from .errors import InvalidArgument
from .formats import write_embeddings
from .rng import RngPool

log = logging.getLogger(__name__)

COLORS = ("red", "blue", "green", "yellow")
SHAPES = ("circle", "square", "triangle", "star")
SIZES = ("small", "large", "tiny")
PLACES = ("inside", "outside")

# Embedding dims read by each slot: colors 0:4, shapes 4:8, sizes 8:11,
# places 11:13. Anything past dim 13 is free noise.
MIN_DIM = 13

_TAGS = [("a", "DET"), ("sits", "VERB")]
_TAGS += [(w, "ADJ") for w in SIZES + COLORS]
_TAGS += [(w, "NOUN") for w in SHAPES]
_TAGS += [(w, "ADV") for w in PLACES]

# Synthetic rating lexicon. Nouns and adjectives rate high, function words
# low, with per-word offsets so ties stay rare.
_SCORE_BASE = {
    "concreteness": {"DET": 1.4, "VERB": 2.2, "ADV": 2.6, "ADJ": 3.6, "NOUN": 4.6},
    "imageability": {"DET": 1.2, "VERB": 2.8, "ADV": 2.4, "ADJ": 4.0, "NOUN": 4.8},
}


def caption_words(embedding: np.ndarray) -> list[str]:
    """Decode the word slots an embedding encodes."""
    e = np.asarray(embedding)
    if e.shape[-1] < MIN_DIM:
        raise InvalidArgument(f"embedding dim must be >= {MIN_DIM}")
    color = COLORS[int(np.argmax(e[0:4]))]
    shape = SHAPES[int(np.argmax(e[4:8]))]
    size = SIZES[int(np.argmax(e[8:11]))]
    place = PLACES[int(np.argmax(e[11:13]))]
    return ["a", size, color, shape, "sits", place]


def vocabulary() -> list[str]:
    return sorted({w for w, _ in _TAGS})


def _swap(words: list[str], i: int, j: int) -> str:
    out = list(words)
    out[i], out[j] = out[j], out[i]
    return " ".join(out)


def _minimal_pairs(captions: list[str]) -> list[dict]:
    """Word-order corruptions of each distinct caption.

    'determiner_order' moves the determiner after the first adjective;
    'verb_position' swaps the verb with its subject noun. Both variants are
    outside the training grammar, so the intact caption should win.
    """
    pairs = []
    seen = set()
    for text in captions:
        if text in seen:
            continue
        seen.add(text)
        words = text.split()
        pairs.append({"good": text, "bad": _swap(words, 0, 1),
                      "subtask": "determiner_order"})
        pairs.append({"good": text, "bad": _swap(words, 3, 4),
                      "subtask": "verb_position"})
    return pairs


def _forced_choice(captions: list[str], n_choices: int) -> list[dict]:
    """Each image against its own caption plus differing distractors."""
    items = []
    n = len(captions)
    for i, text in enumerate(captions):
        distractors = []
        j = (i + 1) % n
        while len(distractors) < n_choices - 1 and j != i:
            if captions[j] != text and captions[j] not in distractors:
                distractors.append(captions[j])
            j = (j + 1) % n
        if len(distractors) < n_choices - 1:
            continue  # too few distinct captions to build this item
        candidates = [text] + distractors
        items.append({"image_index": i, "candidates": candidates, "correct": 0})
    return items


def _lexicon_rows() -> list[tuple[str, float, float]]:
    rows = []
    for k, (word, tag) in enumerate(_TAGS):
        rows.append((word,
                     round(_SCORE_BASE["concreteness"][tag] + 0.017 * k, 3),
                     round(_SCORE_BASE["imageability"][tag] + 0.013 * k, 3)))
    return sorted(rows)


def make_synthetic(out_dir: str, seed: int, n_text: int = 512, n_captions: int = 128,
                   dim: int = 16, n_choices: int = 4) -> dict[str, str]:
    """Write the full synthetic dataset; returns a name -> path map."""
    if dim < MIN_DIM:
        raise InvalidArgument(f"dim must be >= {MIN_DIM}")
    if n_text < 1 or n_captions < 2:
        raise InvalidArgument("need at least one text line and two captions")
    os.makedirs(out_dir, exist_ok=True)
    rng = RngPool(seed)

    emb = rng.stream("synthetic/embeddings").standard_normal((n_captions, dim))
    emb = emb.astype(np.float32)
    captions = [" ".join(caption_words(emb[i])) for i in range(n_captions)]

    # Text-only lines reuse the caption grammar with fresh random slot fills,
    # keeping one closed vocabulary across both streams.
    ts = rng.stream("synthetic/text")
    text_lines = []
    for _ in range(n_text):
        words = ["a", SIZES[ts.integers(len(SIZES))], COLORS[ts.integers(len(COLORS))],
                 SHAPES[ts.integers(len(SHAPES))], "sits", PLACES[ts.integers(len(PLACES))]]
        text_lines.append(" ".join(words))

    paths = {
        "corpus": os.path.join(out_dir, "corpus.txt"),
        "captions": os.path.join(out_dir, "captions.json"),
        "embeddings": os.path.join(out_dir, "embeddings.gfem"),
        "vocab": os.path.join(out_dir, "vocab.txt"),
        "tag_map": os.path.join(out_dir, "tag_map.csv"),
        "lexicon": os.path.join(out_dir, "lexicon.csv"),
        "minimal_pairs": os.path.join(out_dir, "minimal_pairs.jsonl"),
        "forced_choice": os.path.join(out_dir, "forced_choice.jsonl"),
    }

    with open(paths["corpus"], "w", encoding="utf-8") as f:
        f.write("\n".join(text_lines) + "\n")
    records = [{"caption": captions[i], "image_index": i} for i in range(n_captions)]
    with open(paths["captions"], "w", encoding="utf-8") as f:
        json.dump(records, f, indent=1, sort_keys=True)
        f.write("\n")
    write_embeddings(paths["embeddings"], emb)
    with open(paths["vocab"], "w", encoding="utf-8") as f:
        f.write("\n".join(vocabulary()) + "\n")
    with open(paths["tag_map"], "w", encoding="utf-8") as f:
        f.write("token,label\n")
        for word, tag in sorted(_TAGS):
            f.write(f"{word},{tag}\n")
    with open(paths["lexicon"], "w", encoding="utf-8") as f:
        f.write("word,concreteness,imageability\n")
        for word, conc, imag in _lexicon_rows():
            f.write(f"{word},{conc},{imag}\n")
    with open(paths["minimal_pairs"], "w", encoding="utf-8") as f:
        for rec in _minimal_pairs(captions):
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(paths["forced_choice"], "w", encoding="utf-8") as f:
        for rec in _forced_choice(captions, n_choices):
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    log.info("synthetic dataset written to %s (%d text, %d captions)",
             out_dir, n_text, n_captions)
    return paths
