"""Post-hoc analysis of gate behaviour.

Traces per-token gate values at inference, groups them by word category or
by lexicon score bins, and attaches rank statistics. The report writer emits
delimited tables plus rendered figures; identical inputs must give identical
bytes, so figures are drawn on the Agg backend with pinned metadata.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2 as _chi2
from scipy.stats import t as _student_t

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import tensor as T
from .data import N_SPECIALS, caption_batch
from .errors import DataFormatError, InvalidArgument

log = logging.getLogger(__name__)


@dataclass
class GateRecord:
    token_id: int
    surface: str
    position: int
    per_layer: tuple[float, ...]  # mean over features, one value per layer
    gate_value: float             # mean of per_layer


def trace_gates(model, caption_ids: list[np.ndarray], embeddings: np.ndarray,
                tokenizer, batch_size: int = 32) -> list[GateRecord]:
    """Run captions through the model and collect one gate value per real token.

    Specials (PAD, BOS, EOS) are dropped; each remaining position yields the
    mean gate activation across features per layer, plus the layer mean.
    """
    if len(caption_ids) != embeddings.shape[0]:
        raise InvalidArgument("need one embedding per caption")
    records: list[GateRecord] = []
    for lo in range(0, len(caption_ids), batch_size):
        ids = caption_ids[lo:lo + batch_size]
        embs = embeddings[lo:lo + batch_size]
        batch = caption_batch(ids, embs)
        with T.inference_mode():
            trace = model.forward(batch)
        if not trace.gate_values:
            raise InvalidArgument("model has no gate to trace (gate_variant none)")
        # (layers, B, T) after feature mean; token gates broadcast cleanly.
        per_layer = np.stack([g.data.mean(axis=-1) for g in trace.gate_values])
        token_gate = per_layer.mean(axis=0)
        for row in range(batch.token_ids.shape[0]):
            for pos in range(batch.token_ids.shape[1]):
                tok = int(batch.token_ids[row, pos])
                if not batch.pad_mask[row, pos] or tok < N_SPECIALS:
                    continue
                records.append(GateRecord(
                    token_id=tok, surface=tokenizer.token_surface(tok),
                    position=pos,
                    per_layer=tuple(float(v) for v in per_layer[:, row, pos]),
                    gate_value=float(token_gate[row, pos])))
    return records


def load_tag_map(path: str) -> dict[str, str]:
    """token,label pairs; later duplicates are rejected."""
    tags: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            for i, row in enumerate(reader):
                if not row or (i == 0 and row[0] == "token"):
                    continue
                if len(row) != 2:
                    raise DataFormatError(f"{path} row {i + 1}: expected token,label")
                token, label = row[0], row[1]
                if token in tags:
                    raise DataFormatError(f"{path}: duplicate token {token!r}")
                tags[token] = label
    except FileNotFoundError as e:
        raise DataFormatError(f"tag map not found: {path}") from e
    if not tags:
        raise DataFormatError(f"tag map {path} is empty")
    return tags


def load_lexicon(path: str) -> dict[str, dict[str, float]]:
    """Word-rating CSV: header `word,<score>[,<score>...]`, float cells.

    Returns one word -> score map per score column, keyed by column name.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError as e:
        raise DataFormatError(f"lexicon not found: {path}") from e
    rows = [r for r in rows if r]
    if len(rows) < 2 or len(rows[0]) < 2:
        raise DataFormatError(f"lexicon {path} needs a header and at least one entry")
    names = rows[0][1:]
    if len(set(names)) != len(names):
        raise DataFormatError(f"lexicon {path} has duplicate score columns")
    columns: dict[str, dict[str, float]] = {name: {} for name in names}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise DataFormatError(f"{path} row {i}: expected {len(rows[0])} cells")
        word = row[0]
        if word in columns[names[0]]:
            raise DataFormatError(f"{path}: duplicate word {word!r}")
        for name, raw in zip(names, row[1:]):
            try:
                value = float(raw)
            except ValueError as e:
                raise DataFormatError(f"{path} row {i}: bad score {raw!r}") from e
            if not math.isfinite(value):
                raise DataFormatError(f"{path} row {i}: score must be finite")
            columns[name][word] = value
    return columns


@dataclass
class CategorySummary:
    label: str
    mean: float
    sd: float  # population
    n: int


def aggregate_by_category(records: list[GateRecord], tags: dict[str, str],
                          casefold: bool = False) -> tuple[list[CategorySummary], int]:
    """Group gate values by the tag of each surface form.

    Returns summaries sorted by label plus the count of tokens whose surface
    had no tag. Matching is exact unless `casefold` lowers both sides.
    """
    lookup = {k.lower(): v for k, v in tags.items()} if casefold else tags
    groups: dict[str, list[float]] = {}
    unmatched = 0
    for rec in records:
        key = rec.surface.lower() if casefold else rec.surface
        label = lookup.get(key)
        if label is None:
            unmatched += 1
            continue
        groups.setdefault(label, []).append(rec.gate_value)
    if not groups:
        raise InvalidArgument("no record matched any category")
    summaries = [CategorySummary(label=lab, mean=float(np.mean(vals)),
                                 sd=float(np.std(vals)), n=len(vals))
                 for lab, vals in sorted(groups.items())]
    return summaries, unmatched


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Rank from 1, ties get the mean of the ranks they span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def kruskal_wallis(groups: list[np.ndarray]) -> tuple[float, float]:
    """Rank-based k-sample test; returns (H, p) with tie correction applied."""
    if len(groups) < 2:
        raise InvalidArgument("need at least two groups")
    sizes = [len(g) for g in groups]
    if any(s == 0 for s in sizes):
        raise InvalidArgument("every group needs at least one value")
    pooled = np.concatenate([np.asarray(g, dtype=np.float64) for g in groups])
    n = len(pooled)
    if np.all(pooled == pooled[0]):
        raise InvalidArgument("all values identical; ranks carry no information")
    ranks = _average_ranks(pooled)
    h = 0.0
    start = 0
    for s in sizes:
        r_mean = ranks[start:start + s].mean()
        h += s * (r_mean - (n + 1) / 2.0) ** 2
        start += s
    h *= 12.0 / (n * (n + 1))
    # Tie correction: divide by 1 - sum(t^3 - t) / (n^3 - n).
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(((counts ** 3 - counts).sum())) / (n ** 3 - n)
    if correction == 0.0:
        raise InvalidArgument("all values identical; ranks carry no information")
    h /= correction
    p = float(_chi2.sf(h, len(groups) - 1))
    return float(h), p


def spearman(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Rank correlation with average ranks; p from the t approximation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgument("spearman needs two equal-length 1-D arrays")
    n = len(x)
    if n < 3:
        raise InvalidArgument("need at least three points")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float((rx * rx).sum()) * float((ry * ry).sum()))
    if denom == 0.0:
        raise InvalidArgument("constant input; correlation undefined")
    rho = float((rx * ry).sum()) / denom
    if abs(rho) >= 1.0:
        return (1.0 if rho > 0 else -1.0), 0.0
    t_stat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(_student_t.sf(abs(t_stat), n - 2))
    return rho, p


BIN_LABELS = ("low", "mid_low", "mid_high", "high")


def score_bins(lexicon: dict[str, float]) -> tuple[dict[str, str], tuple[float, float, float]]:
    """Assign each lexicon token to one of four score bands.

    Boundaries sit at mean - sd, mean, mean + sd of the lexicon scores
    (population sd). A score on a boundary goes to the higher band.
    """
    if len(lexicon) < 2:
        raise InvalidArgument("lexicon too small to bin")
    vals = np.array(list(lexicon.values()), dtype=np.float64)
    mu, sd = float(vals.mean()), float(vals.std())
    bounds = (mu - sd, mu, mu + sd)
    assignment = {}
    for token, score in lexicon.items():
        band = sum(score >= b for b in bounds)
        assignment[token] = BIN_LABELS[band]
    return assignment, bounds


def aggregate_by_bin(records: list[GateRecord], lexicon: dict[str, float],
                     casefold: bool = False) -> tuple[list[CategorySummary], int]:
    """Group gate values by the score band of each surface form."""
    assignment, _ = score_bins(lexicon)
    ordered = {label: i for i, label in enumerate(BIN_LABELS)}
    summaries, unmatched = aggregate_by_category(records, assignment, casefold=casefold)
    summaries.sort(key=lambda s: ordered[s.label])
    return summaries, unmatched


def _write_summary_csv(path: str, summaries: list[CategorySummary]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "mean_gate", "sd", "n"])
        for s in summaries:
            w.writerow([s.label, repr(s.mean), repr(s.sd), s.n])


def _bar_figure(path: str, summaries: list[CategorySummary], title: str,
                keep_order: bool = False) -> None:
    shown = summaries if keep_order else sorted(summaries, key=lambda s: s.mean)
    fig, ax = plt.subplots(figsize=(6.0, 3.5), dpi=100)
    xs = np.arange(len(shown))
    ax.bar(xs, [s.mean for s in shown], yerr=[s.sd for s in shown],
           capsize=3, color="#4878a8")
    ax.set_xticks(xs)
    ax.set_xticklabels([s.label for s in shown], rotation=30, ha="right")
    ax.set_ylabel("mean gate value")
    ax.set_title(title)
    fig.tight_layout()
    # Pinned metadata keeps the PNG bytes stable across runs and machines.
    fig.savefig(path, format="png", metadata={"Software": "gatefuse"})
    plt.close(fig)


def analysis_report(out_dir: str, records: list[GateRecord], tags: dict[str, str],
                    lexicons: dict[str, dict[str, float]],
                    casefold: bool = False,
                    manifest_hash: str | None = None) -> dict[str, object]:
    """Write gate tables, figures, and a stats summary under `out_dir`.

    Emits gate_by_pos.csv (+ .png), one gate_by_<lexicon>.csv (+ .png) per
    lexicon score, and stats.txt carrying the rank tests, unmatched counts,
    and the hash of the run manifest the gates came from.
    """
    if not records:
        raise InvalidArgument("no gate records to report")
    os.makedirs(out_dir, exist_ok=True)
    stats_lines: list[str] = []
    if manifest_hash is not None:
        stats_lines.append(f"manifest sha256 {manifest_hash}")
    result: dict[str, object] = {}

    by_pos, unmatched = aggregate_by_category(records, tags, casefold=casefold)
    _write_summary_csv(os.path.join(out_dir, "gate_by_pos.csv"), by_pos)
    _bar_figure(os.path.join(out_dir, "gate_by_pos.png"), by_pos, "gate by word category")
    result["by_pos"] = by_pos
    result["unmatched_pos"] = unmatched
    stats_lines.append(f"pos unmatched_tokens {unmatched}")
    groups = _groups_for(records, tags, casefold)
    if len(groups) >= 2 and all(len(g) for g in groups):
        try:
            h, p = kruskal_wallis(groups)
            stats_lines.append(f"pos kruskal_wallis H {repr(h)} p {repr(p)}")
            result["kruskal_wallis"] = (h, p)
        except InvalidArgument as e:
            stats_lines.append(f"pos kruskal_wallis skipped ({e})")

    for name in sorted(lexicons):
        lex = lexicons[name]
        by_bin, missed = aggregate_by_bin(records, lex, casefold=casefold)
        _write_summary_csv(os.path.join(out_dir, f"gate_by_{name}.csv"), by_bin)
        _bar_figure(os.path.join(out_dir, f"gate_by_{name}.png"), by_bin,
                    f"gate by {name} band", keep_order=True)
        result[f"bins_{name}"] = by_bin
        stats_lines.append(f"{name} unmatched_tokens {missed}")
        scores, gates = _paired_scores(records, lex, casefold)
        if len(scores) >= 3 and len(set(scores)) > 1 and len(set(gates)) > 1:
            rho, p = spearman(np.array(scores), np.array(gates))
            stats_lines.append(f"{name} spearman rho {repr(rho)} p {repr(p)}")
            result[f"spearman_{name}"] = (rho, p)
        else:
            stats_lines.append(f"{name} spearman skipped (degenerate input)")

    stats_body = "\n".join(stats_lines) + "\n"
    digest = hashlib.sha256(stats_body.encode("utf-8")).hexdigest()
    with open(os.path.join(out_dir, "stats.txt"), "w", encoding="utf-8") as f:
        f.write(stats_body)
        f.write(f"sha256 {digest}\n")
    result["stats_sha256"] = digest
    log.info("analysis report written to %s", out_dir)
    return result


def _groups_for(records: list[GateRecord], tags: dict[str, str],
                casefold: bool) -> list[np.ndarray]:
    lookup = {k.lower(): v for k, v in tags.items()} if casefold else tags
    groups: dict[str, list[float]] = {}
    for rec in records:
        key = rec.surface.lower() if casefold else rec.surface
        label = lookup.get(key)
        if label is not None:
            groups.setdefault(label, []).append(rec.gate_value)
    return [np.array(groups[k], dtype=np.float64) for k in sorted(groups)]


def _paired_scores(records: list[GateRecord], lexicon: dict[str, float],
                   casefold: bool) -> tuple[list[float], list[float]]:
    """Per-token (lexicon score, gate value) pairs for rank correlation."""
    lookup = {k.lower(): v for k, v in lexicon.items()} if casefold else lexicon
    scores, gates = [], []
    for rec in records:
        key = rec.surface.lower() if casefold else rec.surface
        val = lookup.get(key)
        if val is not None:
            scores.append(val)
            gates.append(rec.gate_value)
    return scores, gates
