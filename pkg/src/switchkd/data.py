"""Seeded synthetic multimodal question answering.

Images are split into a 2x2 grid of regions; each region holds at most one
axis-aligned solid rectangle in one of six palette colours, on black.
Every question has a single-token answer that can be read off the pixels,
so the visual pathway is never optional.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ContractError, DatasetParseError, GenerationError, ShapeError

DATASET_FORMAT = "switchkd-dataset"
DATASET_VERSION = 1


class Vocab:
    PAD, BOS, EOS, SEP = 0, 1, 2, 3
    Q_COUNT, Q_AT, Q_MAJORITY = 4, 5, 6
    NONE = 7
    COLOR0 = 8      # 8..13
    DIGIT0 = 16     # 16..20 -> counts 0..4
    POS0 = 24       # 24..27 -> regions TL, TR, BL, BR
    SIZE = 64


PALETTE = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
])
N_COLORS = len(PALETTE)
N_REGIONS = 4


class Task(str, Enum):
    COLOR_COUNT = "color-count"
    SHAPE_AT_POSITION = "shape-at-position"
    MAJORITY_COLOR = "majority-color"


def label_set(task: Task) -> list[int]:
    """Answer tokens a task can produce."""
    task = Task(task)
    if task is Task.COLOR_COUNT:
        return [Vocab.DIGIT0 + n for n in range(N_REGIONS + 1)]
    if task is Task.SHAPE_AT_POSITION:
        return [Vocab.COLOR0 + c for c in range(N_COLORS)] + [Vocab.NONE]
    return [Vocab.COLOR0 + c for c in range(N_COLORS)]


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_train: int = Field(2000, gt=0)
    n_val: int = Field(500, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    task: Task = Task.MAJORITY_COLOR
    noise_level: float = Field(0.0, ge=0.0, lt=1.0)
    image_size: tuple[int, int, int] = (8, 8, 3)

    @model_validator(mode="after")
    def _check(self):
        if self.image_size[2] <= 0:
            raise ValueError("image_size needs a positive channel count")
        return self


@dataclass(eq=False)
class SyntheticSample:
    id: str
    image: np.ndarray
    prompt: tuple[int, ...]
    answer: tuple[int, ...]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (self.id == other.id and self.prompt == other.prompt
                and self.answer == other.answer
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))

    def content_key(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.image, dtype="<f8").tobytes())
        h.update(bytes(self.prompt))
        return h.hexdigest()


# -- rendering ---------------------------------------------------------------------
def _regions(image_size) -> list[tuple[int, int, int, int]]:
    h, w, c = image_size
    if c != 3:
        raise GenerationError(f"palette rendering needs 3 channels, got {c}")
    if h % 2 or w % 2 or h < 4 or w < 4:
        raise GenerationError(f"image {h}x{w} cannot hold a 2x2 grid of rectangles")
    qh, qw = h // 2, w // 2
    return [(r * qh, c_ * qw, qh, qw) for r in range(2) for c_ in range(2)]


def _render(image_size, region_colors: Sequence[int | None], rng: np.random.Generator) -> np.ndarray:
    image = np.zeros(image_size)
    for (top, left, qh, qw), color in zip(_regions(image_size), region_colors):
        if color is None:
            continue
        rh = int(rng.integers(1, qh + 1))
        rw = int(rng.integers(1, qw + 1))
        r0 = top + int(rng.integers(0, qh - rh + 1))
        c0 = left + int(rng.integers(0, qw - rw + 1))
        image[r0:r0 + rh, c0:c0 + rw] = PALETTE[color]
    return image


def _other_index(rng, exclude: int, n: int = N_COLORS) -> int:
    c = int(rng.integers(0, n - 1))
    return c + 1 if c >= exclude else c


def _layout_for(task: Task, label: int, rng) -> tuple[list[int | None], tuple[int, ...]]:
    """Region colours and prompt consistent with answer index ``label``."""
    regions: list[int | None] = [None] * N_REGIONS
    if task is Task.COLOR_COUNT:
        target = int(rng.integers(0, N_COLORS))
        n = label
        m = int(rng.integers(max(n, 1), N_REGIONS + 1))
        chosen = rng.permutation(N_REGIONS)[:m]
        for j, r in enumerate(chosen):
            regions[r] = target if j < n else _other_index(rng, target)
        return regions, (Vocab.BOS, Vocab.Q_COUNT, Vocab.COLOR0 + target, Vocab.SEP)
    if task is Task.SHAPE_AT_POSITION:
        q = int(rng.integers(0, N_REGIONS))
        others = [r for r in range(N_REGIONS) if r != q]
        if label < N_COLORS:
            regions[q] = label
            k = int(rng.integers(0, N_REGIONS))
        else:
            k = int(rng.integers(1, N_REGIONS))
        for r in rng.permutation(others)[:k]:
            regions[r] = int(rng.integers(0, N_COLORS))
        return regions, (Vocab.BOS, Vocab.Q_AT, Vocab.POS0 + q, Vocab.SEP)
    # majority colour: target strictly outnumbers every other colour
    target = label
    count = int(rng.integers(1, N_REGIONS + 1))
    order = rng.permutation(N_REGIONS)
    for r in order[:count]:
        regions[r] = target
    used: dict[int, int] = {}
    for r in order[count:]:
        if rng.random() < 0.5:
            continue
        c = _other_index(rng, target)
        if used.get(c, 0) + 1 < count:
            regions[r] = c
            used[c] = used.get(c, 0) + 1
    return regions, (Vocab.BOS, Vocab.Q_MAJORITY, Vocab.SEP, Vocab.SEP)


def _make_sample(spec: DatasetSpec, label: int, rng, sample_id: str) -> SyntheticSample:
    task = Task(spec.task)
    regions, prompt = _layout_for(task, label, rng)
    image = _render(spec.image_size, regions, rng)
    return SyntheticSample(id=sample_id, image=image, prompt=prompt,
                           answer=(label_set(task)[label],))


def _balanced_labels(n: int, n_labels: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_labels)


def generate(spec: DatasetSpec) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Train and validation samples; identical specs give identical output."""
    task = Task(spec.task)
    _regions(spec.image_size)
    labels = label_set(task)
    rng = np.random.default_rng(spec.seed)
    seen: set[str] = set()
    splits = []
    for split, n in (("train", spec.n_train), ("val", spec.n_val)):
        out = []
        for i, lab in enumerate(_balanced_labels(n, len(labels), rng)):
            for _ in range(1000):
                sample = _make_sample(spec, int(lab), rng, f"{split}-{i:06d}")
                key = sample.content_key()
                if key not in seen:
                    break
            else:
                raise GenerationError("could not draw a unique sample; request fewer samples")
            seen.add(key)
            out.append(sample)
        splits.append(out)
    train, val = splits
    if spec.noise_level > 0:
        n_flip = int(round(spec.noise_level * len(train)))
        for j in rng.permutation(len(train))[:n_flip]:
            s = train[int(j)]
            current = labels.index(s.answer[0])
            s.answer = (labels[_other_index(rng, current, len(labels))],)
    return train, val


# -- independent labeler ---------------------------------------------------------------
def read_regions(image: np.ndarray) -> list[int | None]:
    """Recover the colour in each region from pixels alone."""
    image = np.asarray(image)
    h, w, _ = image.shape
    qh, qw = h // 2, w // 2
    found: list[int | None] = []
    for r in range(2):
        for c in range(2):
            block = image[r * qh:(r + 1) * qh, c * qw:(c + 1) * qw].reshape(-1, image.shape[2])
            lit = block[np.abs(block).sum(axis=1) > 0]
            if lit.size == 0:
                found.append(None)
                continue
            colour = lit[0]
            matches = np.flatnonzero(np.all(PALETTE == colour, axis=1))
            if matches.size != 1 or not np.all(lit == colour):
                raise ValueError("region does not hold a single palette colour")
            found.append(int(matches[0]))
    return found


def rule_label(image: np.ndarray, prompt: Sequence[int]) -> int:
    """Answer token computed by rule from the image and the question."""
    regions = read_regions(image)
    kind = prompt[1]
    if kind == Vocab.Q_COUNT:
        target = prompt[2] - Vocab.COLOR0
        return Vocab.DIGIT0 + sum(1 for r in regions if r == target)
    if kind == Vocab.Q_AT:
        colour = regions[prompt[2] - Vocab.POS0]
        return Vocab.NONE if colour is None else Vocab.COLOR0 + colour
    if kind == Vocab.Q_MAJORITY:
        counts = np.bincount([r for r in regions if r is not None], minlength=N_COLORS)
        best = np.flatnonzero(counts == counts.max())
        if best.size != 1:
            raise ValueError("no strict majority colour")
        return Vocab.COLOR0 + int(best[0])
    raise ValueError(f"unknown question token {kind}")


# -- batching ------------------------------------------------------------------------
def batch_iterate(samples: Sequence[SyntheticSample], batch_size: int,
                  shuffle_seed: int | None = None) -> Iterator[list[SyntheticSample]]:
    """One epoch of batches; the last batch may be short."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if len(samples) == 0:
        raise ContractError("cannot iterate an empty dataset")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[int(i)] for i in order[start:start + batch_size]]


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray      # [B, H, W, C]
    text: np.ndarray        # [B, T] teacher-forced input (prompt + answer[:-1])
    targets: np.ndarray     # [B, T] next-token targets
    mask: np.ndarray        # [B, T] True where the target is an answer token
    answers: list[tuple[int, ...]]
    prompts: list[tuple[int, ...]]

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: Sequence[SyntheticSample]) -> Batch:
    lengths = {(len(s.prompt), len(s.answer)) for s in samples}
    if len(lengths) != 1:
        raise ShapeError("samples in a batch must share prompt and answer lengths")
    rows, targets, masks = [], [], []
    for s in samples:
        seq = list(s.prompt) + list(s.answer)
        rows.append(seq[:-1])
        targets.append(seq[1:])
        masks.append([False] * (len(s.prompt) - 1) + [True] * len(s.answer))
    return Batch(
        ids=[s.id for s in samples],
        images=np.stack([s.image for s in samples]),
        text=np.asarray(rows, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64),
        mask=np.asarray(masks, dtype=bool),
        answers=[tuple(s.answer) for s in samples],
        prompts=[tuple(s.prompt) for s in samples],
    )


# -- persistence -----------------------------------------------------------------------
def _encode(sample: SyntheticSample) -> str:
    record = {
        "id": sample.id,
        "image": {"shape": list(sample.image.shape), "data": sample.image.reshape(-1).tolist()},
        "prompt": list(sample.prompt),
        "answer": list(sample.answer),
    }
    return json.dumps(record, separators=(",", ":"), sort_keys=True)


def persist(samples: Sequence[SyntheticSample], path, meta: dict | None = None) -> Path:
    """JSON-lines file: a header line, then one sample per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "count": len(samples),
              "meta": meta or {}}
    lines = [json.dumps(header, separators=(",", ":"), sort_keys=True)]
    lines += [_encode(s) for s in samples]
    path.write_text("\n".join(lines) + "\n")
    return path


def _decode(record, path, line_no: int) -> SyntheticSample:
    try:
        shape = tuple(int(v) for v in record["image"]["shape"])
        data = np.asarray(record["image"]["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ValueError("image data does not match its shape header")
        return SyntheticSample(
            id=str(record["id"]),
            image=data.reshape(shape),
            prompt=tuple(int(t) for t in record["prompt"]),
            answer=tuple(int(t) for t in record["answer"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(path, line_no, f"bad sample record ({exc})") from exc


def load(path) -> list[SyntheticSample]:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError(path, 1, "missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(path, 1, f"malformed header ({exc.msg})") from exc
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise DatasetParseError(path, 1, "unsupported dataset format or version")
    samples = []
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(path, line_no, f"malformed JSON ({exc.msg})") from exc
        samples.append(_decode(record, path, line_no))
    if len(samples) != header.get("count"):
        raise DatasetParseError(path, len(lines) + 1,
                                f"expected {header.get('count')} samples, found {len(samples)}")
    return samples
