"""Dataset records, vocabulary, on-disk formats and the synthetic corpus generator."""
from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import Caption, EmptyCaptionError, tokenize

BOS, EOS, UNK = 0, 1, 2
RESERVED = ("<bos>", "<eos>", "<unk>")

GRID_MAGIC = b"TGAF"
EMB_MAGIC = b"TGAS"
FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """A file failed header or payload validation."""


# -- vocabulary -------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    id_to_word: tuple

    def __post_init__(self):
        if tuple(self.id_to_word[:3]) != RESERVED:
            raise ValueError("first three entries must be the reserved tokens")
        if len(set(self.id_to_word)) != len(self.id_to_word):
            raise ValueError("duplicate words in vocabulary")
        object.__setattr__(self, "word_to_id", {w: i for i, w in enumerate(self.id_to_word)})

    def __len__(self) -> int:
        return len(self.id_to_word)

    def encode(self, caption: Caption) -> list[int]:
        return [BOS] + [self.word_to_id.get(w, UNK) for w in caption] + [EOS]

    def decode(self, ids: Iterable[int]) -> Caption:
        words = []
        for i in ids:
            if i == BOS:
                continue
            if i == EOS:
                break
            words.append(self.id_to_word[i])
        return tuple(words)

    def to_json(self) -> str:
        return json.dumps({"id_to_word": list(self.id_to_word)})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(tuple(json.loads(text)["id_to_word"]))


def build_vocab(train_records: Sequence["DatasetRecord"], min_count_exclusive: int = 5) -> Vocabulary:
    """Keep words seen more than ``min_count_exclusive`` times in training references.

    Ids are assigned by descending frequency, ties broken lexicographically.
    """
    counts: Counter = Counter()
    for rec in train_records:
        if rec.split != "train":
            continue
        for cap in rec.references:
            counts.update(cap)
    if not counts:
        raise ValueError("training split is empty")
    kept = sorted((w for w, c in counts.items() if c > min_count_exclusive),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(RESERVED + tuple(kept))


def encode_caption(caption: Caption, vocab: Vocabulary) -> list[int]:
    return vocab.encode(caption)


# -- feature grids and sentence embeddings ------------------------------------

@dataclass
class FeatureGrid:
    image_id: str
    grid: np.ndarray  # (R, R, P) float32

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 3 or g.shape[0] != g.shape[1] or g.shape[0] < 1 or g.shape[2] < 1:
            raise ValueError(f"grid must have shape (R, R, P), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("grid contains non-finite values")
        self.grid = g.astype(np.float32, copy=False)

    @property
    def R(self) -> int:
        return self.grid.shape[0]

    @property
    def P(self) -> int:
        return self.grid.shape[2]

    def regions(self) -> np.ndarray:
        """Region features as an (R*R, P) float64 array, row-major over cells."""
        return self.grid.reshape(-1, self.P).astype(np.float64)


def save_feature_grid(path: str | Path, fg: FeatureGrid) -> None:
    header = GRID_MAGIC + struct.pack("<HII", FORMAT_VERSION, fg.R, fg.P)
    Path(path).write_bytes(header + fg.grid.astype("<f4").tobytes(order="C"))


def load_feature_grid(path: str | Path, image_id: str | None = None) -> FeatureGrid:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 14 or raw[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, R, P = struct.unpack_from("<HII", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if R < 1 or P < 1:
        raise FormatError(f"{path}: invalid dimensions R={R} P={P}")
    payload = raw[14:]
    if len(payload) != 4 * R * R * P:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {4 * R * R * P}")
    grid = np.frombuffer(payload, dtype="<f4").reshape(R, R, P).astype(np.float32)
    if not np.all(np.isfinite(grid)):
        raise FormatError(f"{path}: non-finite values")
    return FeatureGrid(image_id if image_id is not None else path.stem, grid)


def save_embeddings(path: str | Path, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise ValueError("embeddings must be a (count, S) array")
    header = EMB_MAGIC + struct.pack("<HII", FORMAT_VERSION, *vectors.shape)
    Path(path).write_bytes(header + vectors.astype("<f4").tobytes(order="C"))


def load_embeddings(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 14 or raw[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count, dim = struct.unpack_from("<HII", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[14:]
    if len(payload) != 4 * count * dim:
        raise FormatError(f"{path}: payload size does not match header")
    vecs = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    if not np.all(np.isfinite(vecs)):
        raise FormatError(f"{path}: non-finite values")
    return vecs


# -- records and the caption file ------------------------------------------------

@dataclass
class DatasetRecord:
    image_id: str
    feature: FeatureGrid
    references: list  # list[Caption]
    split: str = "train"
    raw_captions: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if not self.references:
            raise ValueError(f"image {self.image_id} has no reference captions")
        if any(len(c) == 0 for c in self.references):
            raise EmptyCaptionError(f"image {self.image_id} has an empty reference")


def caption_ids(records: Sequence[DatasetRecord]) -> list[str]:
    """Stable caption ids, ``<image_id>#<j>``, in file order."""
    return [f"{r.image_id}#{j}" for r in records for j in range(len(r.references))]


def save_dataset(directory: str | Path, records: Sequence[DatasetRecord]) -> None:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    with open(directory / "captions.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            raw = rec.raw_captions or [" ".join(c) for c in rec.references]
            row = {"image_id": rec.image_id, "split": rec.split, "captions": raw}
            if rec.meta:
                row["meta"] = rec.meta
            fh.write(json.dumps(row) + "\n")
            save_feature_grid(directory / "features" / f"{rec.image_id}.tgaf", rec.feature)


def load_dataset(directory: str | Path) -> list[DatasetRecord]:
    directory = Path(directory)
    records = []
    with open(directory / "captions.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                image_id = str(row["image_id"])
                raw = list(row["captions"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"captions.jsonl line {lineno}: {exc}") from exc
            fg = load_feature_grid(directory / "features" / f"{image_id}.tgaf", image_id)
            refs = [tokenize(c) for c in raw]
            records.append(DatasetRecord(image_id, fg, refs, row.get("split", "train"),
                                         raw, row.get("meta", {})))
    return records


# -- synthetic corpus ------------------------------------------------------------

@dataclass(frozen=True)
class SynthVocab:
    objects: tuple = ("apple", "ball", "bike", "bird", "boat", "book", "car", "cat",
                      "chair", "clock", "cup", "dog", "elephant", "hat", "horse",
                      "kite", "lamp", "sheep", "tree", "umbrella")
    colors: tuple = ("black", "blue", "brown", "green", "orange", "red", "white", "yellow")
    scenes: tuple = (("grass", "on the grass"), ("water", "in the water"),
                     ("street", "on the street"), ("table", "on a table"),
                     ("snow", "in the snow"), ("sand", "on the sand"))
    min_objects: int = 1
    max_objects: int = 3
    color_prob: float = 0.7
    # unnamed distractor patterns planted alongside the named objects
    min_clutter: int = 0
    max_clutter: int = 0
    clutter_kinds: int = 8


@dataclass(frozen=True)
class PatternBank:
    objects: np.ndarray
    colors: np.ndarray
    scenes: np.ndarray
    clutter: np.ndarray
    noise: float

    @classmethod
    def fixed(cls, vocab: SynthVocab, P: int, object_scale: float = 1.0,
              color_scale: float = 0.5, scene_scale: float = 0.4, noise: float = 0.15) -> "PatternBank":
        # independent of the dataset seed so every corpus shares one bank
        rng = np.random.default_rng(20170101 + P)
        return cls(objects=object_scale * rng.standard_normal((len(vocab.objects), P)),
                   colors=color_scale * rng.standard_normal((len(vocab.colors), P)),
                   scenes=scene_scale * rng.standard_normal((len(vocab.scenes), P)),
                   clutter=object_scale * rng.standard_normal((vocab.clutter_kinds, P)),
                   noise=noise)


_TEMPLATES = (
    "{L} {S}",
    "there is {L} {S}",
    "{L} sitting {S}",
    "a photo of {L} {S}",
    "{L} can be seen {S}",
    "{S} there is {L}",
)
_JOINERS2 = ("{a} and {b}", "{a} next to {b}", "{a} with {b}", "{a} near {b}")
_JOINERS3 = ("{a} {b} and {c}", "{a} with {b} and {c}", "{a} and {b} next to {c}")


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _synth_caption(rng: np.random.Generator, objs: list, scene_phrase: str, vocab: SynthVocab) -> str:
    phrases = []
    for color, obj in (objs[i] for i in rng.permutation(len(objs))):
        words = [color, obj] if rng.random() < vocab.color_prob else [obj]
        phrases.append(" ".join([_article(words[0])] + words))
    if len(phrases) == 1:
        listing = phrases[0]
    elif len(phrases) == 2:
        listing = _JOINERS2[rng.integers(len(_JOINERS2))].format(a=phrases[0], b=phrases[1])
    else:
        listing = _JOINERS3[rng.integers(len(_JOINERS3))].format(a=phrases[0], b=phrases[1], c=phrases[2])
    text = _TEMPLATES[rng.integers(len(_TEMPLATES))].format(L=listing, S=scene_phrase)
    return text[0].upper() + text[1:] + "."


def synth_dataset(seed: int, num_images: int, vocab_spec: SynthVocab | None = None,
                  R: int = 4, P: int = 16, captions_per_image: int = 5,
                  splits: dict | None = None, bank: PatternBank | None = None) -> list[DatasetRecord]:
    """Deterministic toy corpus whose captions name the objects planted in each grid.

    Each grid cell holds either the scene pattern or one planted object
    (object pattern plus its colour pattern), with Gaussian noise everywhere.
    ``splits`` maps split name to image count, assigned in order; the
    remainder goes to train.
    """
    if num_images < 2:
        raise ValueError("num_images must be >= 2")
    vocab_spec = vocab_spec or SynthVocab()
    bank = bank or PatternBank.fixed(vocab_spec, P)
    if bank.objects.shape[1] != P:
        raise ValueError("pattern bank width does not match P")
    if vocab_spec.max_objects + vocab_spec.max_clutter > R * R:
        raise ValueError("more objects than grid cells")
    split_of = []
    for name in ("test", "val"):
        split_of += [name] * (splits or {}).get(name, 0)
    split_of = ["train"] * (num_images - len(split_of)) + split_of
    if len(split_of) != num_images:
        raise ValueError("split counts exceed num_images")

    rng = np.random.default_rng(seed)
    width = len(str(num_images - 1))
    records = []
    for idx in range(num_images):
        m = int(rng.integers(vocab_spec.min_objects, vocab_spec.max_objects + 1))
        obj_ids = rng.choice(len(vocab_spec.objects), size=m, replace=False)
        color_ids = rng.integers(len(vocab_spec.colors), size=m)
        scene_id = int(rng.integers(len(vocab_spec.scenes)))
        n_clutter = 0
        if vocab_spec.max_clutter > 0:
            n_clutter = int(rng.integers(vocab_spec.min_clutter, vocab_spec.max_clutter + 1))
        occupied = rng.choice(R * R, size=m + n_clutter, replace=False)
        cells, clutter_cells = occupied[:m], occupied[m:]

        flat = np.tile(bank.scenes[scene_id], (R * R, 1))
        for o, c, cell in zip(obj_ids, color_ids, cells):
            flat[cell] = bank.objects[o] + bank.colors[c]
        for cell in clutter_cells:
            flat[cell] = bank.clutter[rng.integers(len(bank.clutter))]
        flat = flat + bank.noise * rng.standard_normal(flat.shape)
        grid = flat.reshape(R, R, P).astype(np.float32)

        objs = [(vocab_spec.colors[c], vocab_spec.objects[o]) for o, c in zip(obj_ids, color_ids)]
        scene_word, scene_phrase = vocab_spec.scenes[scene_id]
        raw = [_synth_caption(rng, objs, scene_phrase, vocab_spec) for _ in range(captions_per_image)]
        image_id = f"synth{idx:0{width}d}"
        meta = {"scene": scene_word,
                "objects": [{"color": c, "name": o, "cell": int(cell)}
                            for (c, o), cell in zip(objs, cells)],
                "clutter_cells": [int(c) for c in clutter_cells]}
        records.append(DatasetRecord(image_id, FeatureGrid(image_id, grid),
                                     [tokenize(r) for r in raw], split_of[idx], raw, meta))
    return records
