"""Curriculum schedules over the text-only and image-caption datasets.

Five strategies: alternating epochs, all-text-then-image, all-image-then-text,
a single shuffled pool where text samples carry zero-filled image tensors
(nonuniform mixing), and lockstep pairing where every step consumes one text
batch and one image-caption batch (uniform mixing, so the smaller caption set
is traversed twice per text traversal at the reference 2:1 size ratio).

Epoch orderings are pure functions of (seed, epoch), so a resumed run
regenerates exactly the batches the original run would have seen. Batches
drop the final partial remainder of each epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .data import Batch, CaptionDataset, caption_batch, mixed_batch, text_batch
from .errors import InvalidArgument
from .rng import RngPool


@dataclass
class EpochPlan:
    index: int          # position in the run, 0-based
    kind: str           # "text" | "image" | "nonuniform" | "uniform"
    n_steps: int


@dataclass
class CurriculumSchedule:
    strategy: str
    batch_size: int
    epochs: list[EpochPlan]
    total_steps: int
    total_image_steps: int


def build_schedule(strategy: str, epochs_per_modality: int, n_text: int, n_image: int,
                   batch_size: int, start_modality: str = "text") -> CurriculumSchedule:
    """Lay out the run's epochs and count its steps.

    `total_image_steps` counts steps that consume image-caption data; it is
    the denominator of the gate-temperature anneal. Mixed-strategy steps all
    count, since the pool interleaves caption data throughout.
    """
    text_steps = n_text // batch_size
    image_steps = n_image // batch_size
    pool_steps = (n_text + n_image) // batch_size

    def need(steps: int, what: str):
        if steps <= 0:
            raise InvalidArgument(
                f"batch_size {batch_size} leaves zero full batches of {what}")

    kinds: list[str] = []
    if strategy == "alternating":
        first, second = ("text", "image") if start_modality == "text" else ("image", "text")
        for _ in range(epochs_per_modality):
            kinds += [first, second]
    elif strategy == "text_first":
        kinds = ["text"] * epochs_per_modality + ["image"] * epochs_per_modality
    elif strategy == "image_first":
        kinds = ["image"] * epochs_per_modality + ["text"] * epochs_per_modality
    elif strategy == "nonuniform_mixed":
        kinds = ["nonuniform"] * epochs_per_modality
    elif strategy == "uniform_mixed":
        kinds = ["uniform"] * epochs_per_modality
    else:
        raise InvalidArgument(f"unknown strategy {strategy!r}")

    steps_for = {"text": text_steps, "image": image_steps,
                 "nonuniform": pool_steps, "uniform": text_steps}
    epochs = []
    for kind in kinds:
        need(steps_for[kind], kind)
        epochs.append(EpochPlan(index=len(epochs), kind=kind, n_steps=steps_for[kind]))

    total = sum(e.n_steps for e in epochs)
    image_total = sum(e.n_steps for e in epochs if e.kind != "text")
    return CurriculumSchedule(strategy=strategy, batch_size=batch_size, epochs=epochs,
                              total_steps=total, total_image_steps=image_total)


@dataclass
class StepSpec:
    """Dataset indices for one step, before batches are materialized."""

    kind: str                                  # "text" | "image" | "mixed" | "paired"
    text_indices: np.ndarray | None = None     # rows of the text train split
    image_indices: np.ndarray | None = None    # rows of the caption train split
    mixed_rows: list[tuple[bool, int]] | None = None   # (is_image, split row)


def _cycled_image_order(rng: RngPool, n: int, start: int, count: int) -> np.ndarray:
    """`count` caption positions starting at global cursor `start`.

    The global order is the concatenation of per-cycle permutations, each a
    pure function of (seed, cycle), so any window is recomputable.
    """
    out = np.empty(count, dtype=np.int64)
    filled = 0
    pos = start
    while filled < count:
        cycle, offset = divmod(pos, n)
        perm = rng.fresh(f"order/uniform_image/cycle{cycle}").permutation(n)
        take = min(n - offset, count - filled)
        out[filled:filled + take] = perm[offset:offset + take]
        filled += take
        pos += take
    return out


def plan_epoch_steps(plan: EpochPlan, rng: RngPool, text_train: np.ndarray,
                     image_train: np.ndarray, batch_size: int,
                     image_consumed: int = 0) -> list[StepSpec]:
    """Deterministic step layout for one epoch.

    `image_consumed` is the number of caption samples already drawn by
    earlier uniform-mixed steps; it positions the cycling caption cursor.
    """
    B = batch_size
    specs: list[StepSpec] = []
    if plan.kind == "text":
        perm = rng.fresh(f"order/text/epoch{plan.index}").permutation(len(text_train))
        for s in range(plan.n_steps):
            specs.append(StepSpec("text", text_indices=text_train[perm[s * B:(s + 1) * B]]))
    elif plan.kind == "image":
        perm = rng.fresh(f"order/image/epoch{plan.index}").permutation(len(image_train))
        for s in range(plan.n_steps):
            specs.append(StepSpec("image", image_indices=image_train[perm[s * B:(s + 1) * B]]))
    elif plan.kind == "nonuniform":
        pool = [(False, int(i)) for i in text_train] + [(True, int(i)) for i in image_train]
        perm = rng.fresh(f"order/pool/epoch{plan.index}").permutation(len(pool))
        for s in range(plan.n_steps):
            rows = [pool[j] for j in perm[s * B:(s + 1) * B]]
            specs.append(StepSpec("mixed", mixed_rows=rows))
    elif plan.kind == "uniform":
        perm = rng.fresh(f"order/text/epoch{plan.index}").permutation(len(text_train))
        for s in range(plan.n_steps):
            img_pos = _cycled_image_order(rng, len(image_train),
                                          image_consumed + s * B, B)
            specs.append(StepSpec("paired",
                                  text_indices=text_train[perm[s * B:(s + 1) * B]],
                                  image_indices=image_train[img_pos]))
    else:
        raise InvalidArgument(f"unknown epoch kind {plan.kind!r}")
    return specs


@dataclass
class PairedBatch:
    text: Batch
    image: Batch


def materialize(spec: StepSpec, text_seqs: list[np.ndarray],
                captions: CaptionDataset) -> Batch | PairedBatch:
    """Build the actual batch(es) a StepSpec describes."""
    if spec.kind == "text":
        return text_batch([text_seqs[i] for i in spec.text_indices])
    if spec.kind == "image":
        return captions.batch(spec.image_indices)
    if spec.kind == "paired":
        return PairedBatch(text=text_batch([text_seqs[i] for i in spec.text_indices]),
                           image=captions.batch(spec.image_indices))
    if spec.kind == "mixed":
        dim = captions.embeddings.shape[1]
        seqs = []
        rows = np.zeros((len(spec.mixed_rows), dim), dtype=captions.embeddings.dtype)
        image_rows = np.zeros(len(spec.mixed_rows), dtype=bool)
        for r, (is_image, idx) in enumerate(spec.mixed_rows):
            if is_image:
                seqs.append(captions.token_seqs[idx])
                rows[r] = captions.embeddings[captions.image_indices[idx]]
                image_rows[r] = True
            else:
                seqs.append(text_seqs[idx])
        return mixed_batch(seqs, rows, image_rows)
    raise InvalidArgument(f"unknown step kind {spec.kind!r}")


def image_samples_in(spec: StepSpec) -> int:
    """Caption samples a step consumes (used by the uniform-mixed cursor)."""
    if spec.kind in ("image", "paired"):
        return len(spec.image_indices)
    if spec.kind == "mixed":
        return sum(1 for is_image, _ in spec.mixed_rows if is_image)
    return 0


def tau_for_step(cfg: TrainConfig, schedule: CurriculumSchedule, plan: EpochPlan,
                 image_step_global: int, image_step_in_epoch: int) -> float:
    """Gate temperature for the next step, under the configured anneal domain."""
    from .gating import TemperatureSchedule
    if cfg.tau_anneal_domain == "per_epoch":
        ts = TemperatureSchedule(total_image_steps=plan.n_steps, tau_start=cfg.tau_start,
                                 tau_end=cfg.tau_end, anneal_fraction=cfg.tau_anneal_fraction)
        return ts.tau_at(image_step_in_epoch)
    ts = TemperatureSchedule(total_image_steps=schedule.total_image_steps,
                             tau_start=cfg.tau_start, tau_end=cfg.tau_end,
                             anneal_fraction=cfg.tau_anneal_fraction)
    return ts.tau_at(image_step_global)
