"""Dataset records, vocabulary, tokenization and the synthetic pedestrian corpus.

Manifests are JSON Lines, one record per line::

    {"id": 3, "image": "images/000003_01.png", "captions": ["..."], "split": "train"}

Image paths are resolved relative to the manifest's directory.
"""
from __future__ import annotations

import itertools
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

PAD_ID = 0
UNK_ID = 1
SPLITS = ("train", "val", "test")

_PUNCT = re.compile(r"[^\w\s]")


class DataError(ValueError):
    """Malformed, missing or leaking data."""


@dataclass
class DatasetRecord:
    identity_id: int
    image_ref: str
    captions: list[str]
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)
    attributes: dict[str, str] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.identity_id < 0:
            raise DataError(f"identity id must be non-negative, got {self.identity_id}")
        if not self.captions:
            raise DataError(f"record {self.image_ref} has no caption")

    def image(self) -> np.ndarray:
        """Return the H x W x 3 uint8 raster, reading it from disk if needed."""
        if self.pixels is not None:
            return self.pixels
        return read_image(self.image_ref)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# vocabulary and tokenization


def split_words(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


class Vocabulary:
    """Word inventory. Id 0 is padding, id 1 is unknown, words start at 2."""

    def __init__(self, words: Sequence[str], min_count: int = 1, dim: int = 512):
        if len(set(words)) != len(words):
            raise DataError("vocabulary words must be unique")
        self.words = list(words)
        self.min_count = min_count
        self.dim = dim
        self._index = {w: i + 2 for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        """Number of unique words U (special ids excluded)."""
        return len(self.words)

    @property
    def num_ids(self) -> int:
        return len(self.words) + 2

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def index(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def word(self, idx: int) -> str:
        if idx == PAD_ID:
            return "<pad>"
        if idx == UNK_ID:
            return "<unk>"
        return self.words[idx - 2]

    def to_json(self) -> dict:
        return {"words": self.words, "min_count": self.min_count, "dim": self.dim}

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        return cls(data["words"], data.get("min_count", 1), data.get("dim", 512))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocabulary(records: Iterable[DatasetRecord], min_count: int = 1,
                     dim: int = 512) -> Vocabulary:
    """Count words over training captions; words seen fewer than `min_count` times map to unknown.

    Words are ordered by first occurrence so the result does not depend on hashing.
    """
    counts: Counter[str] = Counter()
    for rec in records:
        for caption in rec.captions:
            counts.update(split_words(caption))
    if not counts:
        raise DataError("empty training corpus")
    return Vocabulary([w for w, c in counts.items() if c >= min_count], min_count, dim)


@dataclass(frozen=True)
class TokenizedCaption:
    ids: np.ndarray  # (n_max,) int64, zero-padded
    length: int

    def __eq__(self, other):
        if not isinstance(other, TokenizedCaption):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.ids, other.ids)

    @property
    def valid_ids(self) -> np.ndarray:
        return self.ids[: self.length]


def tokenize(text: str, vocab: Vocabulary, n_max: int = 64) -> TokenizedCaption:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    words = split_words(text)[:n_max]
    if not words:
        raise DataError("empty caption after tokenization")
    ids = np.zeros(n_max, dtype=np.int64)
    ids[: len(words)] = [vocab.index(w) for w in words]
    return TokenizedCaption(ids, len(words))


def detokenize(caption: TokenizedCaption, vocab: Vocabulary) -> str:
    return " ".join(vocab.word(int(i)) for i in caption.valid_ids)


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Tokenize and pad to the longest caption in the batch: (ids B x L, lengths B)."""
    toks = [tokenize(t, vocab, n_max) for t in texts]
    width = max(t.length for t in toks)
    ids = np.stack([t.ids[:width] for t in toks])
    return ids, np.array([t.length for t in toks], dtype=np.int64)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path: str | Path, splits: dict[str, Sequence[DatasetRecord]]) -> None:
    """Write records as JSON Lines. Pixels held in memory are saved as PNGs next to it."""
    path = Path(path)
    root = path.parent
    lines = []
    for split, records in splits.items():
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        for rec in records:
            if rec.pixels is not None:
                target = root / rec.image_ref
                target.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(rec.pixels).save(target, optimize=False)
            row = {"id": rec.identity_id, "image": rec.image_ref,
                   "captions": list(rec.captions), "split": split}
            if rec.attributes is not None:
                row["attributes"] = rec.attributes
            lines.append(json.dumps(row, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(manifest_path: str | Path, load_pixels: bool = False
                 ) -> tuple[list[DatasetRecord], list[DatasetRecord], list[DatasetRecord]]:
    """Read a manifest into (train, val, test). Image refs become absolute paths."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    out: dict[str, list[DatasetRecord]] = {s: [] for s in SPLITS}
    owner: dict[int, str] = {}
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            pid, image, captions, split = int(row["id"]), row["image"], row["captions"], row["split"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{manifest_path}:{lineno}: malformed record ({exc})") from exc
        if split not in out:
            raise DataError(f"{manifest_path}:{lineno}: unknown split {split!r}")
        if owner.setdefault(pid, split) != split:
            raise DataError(f"identity {pid} appears in both {owner[pid]!r} and {split!r} splits")
        img_path = root / image
        if not img_path.is_file():
            raise DataError(f"missing image file {img_path}")
        rec = DatasetRecord(pid, str(img_path), list(captions), attributes=row.get("attributes"))
        if load_pixels:
            rec.pixels = read_image(img_path)
        out[split].append(rec)
    return out["train"], out["val"], out["test"]


# ---------------------------------------------------------------------------
# synthetic corpus

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (215, 35, 35),
    "blue": (35, 70, 215),
    "green": (35, 155, 50),
    "yellow": (235, 215, 40),
    "black": (25, 25, 25),
    "white": (238, 238, 238),
    "gray": (128, 128, 128),
    "purple": (125, 45, 165),
    "orange": (245, 135, 25),
    "pink": (240, 135, 185),
    "brown": (120, 72, 30),
}
PALETTE_INDEX = {name: i for i, name in enumerate(PALETTE)}
ZONES = ("hat", "shirt", "pants", "shoes", "bag")
ZONE_NOUNS = {
    "hat": ("hat", "cap"),
    "shirt": ("shirt", "jacket", "top"),
    "pants": ("pants", "trousers"),
    "shoes": ("shoes", "sneakers"),
    "bag": ("bag",),
}
# rows (top, bottom) at 96 px height; the three thirds are 0-31, 32-63 and 64-95
_ROWS = {"hat": (3, 14), "face": (14, 27), "shirt": (29, 61), "pants": (64, 85), "shoes": (86, 94)}
_SKIN = (222, 186, 150)
_TEMPLATES = (
    "the person is wearing {0} , {1} , {2} and {3} .",
    "a pedestrian with {0} and {1} . {2} and {3} are also visible .",
    "this person has {0} , {1} and {2} , with {3} .",
    "{0} , {1} , {2} and {3} are worn by this walker .",
    "a man in {0} and {1} , wearing {2} and {3} .",
    "the woman wears {0} with {1} , {2} and {3} .",
    "someone walking in {0} . the outfit also has {1} , {2} and {3} .",
    "a young person with {0} , {1} , {2} and {3} on .",
)
_TARGET_TEMPLATES = (
    "this individual sports {0} , {1} , {2} together with {3} .",
    "someone dressed in {0} and {1} , plus {2} and {3} .",
)
_BAG_SENTENCES = ("the person carries {0} .", "{0} hangs at the side .")


@dataclass(frozen=True)
class SyntheticSpec:
    identities: int = 50
    images_per_identity: int = 4
    test_identities: int = 10
    captions_per_image: int = 2
    image_size: tuple[int, int] = (96, 32)
    # eight colours keep the desk benchmark learnable within 30 epochs; pass
    # tuple(PALETTE) for the harder eleven-colour corpus
    colors: tuple[str, ...] = tuple(PALETTE)[:8]
    bag_colors: tuple[str, ...] = ("none", "red", "blue", "green", "yellow", "black", "white")
    seed: int = 0
    domain: str = "source"

    @property
    def inventory_size(self) -> int:
        return len(self.colors) ** 4 * len(self.bag_colors)


def _attribute_tuple(index: int, spec: SyntheticSpec) -> dict[str, str]:
    index, bag = divmod(index, len(spec.bag_colors))
    attrs = {}
    for zone in ("shoes", "pants", "shirt", "hat"):
        index, c = divmod(index, len(spec.colors))
        attrs[zone] = spec.colors[c]
    attrs["bag"] = spec.bag_colors[bag]
    return {z: attrs[z] for z in ZONES}


def synthetic_caption(attrs: dict[str, str], template: int, seed: int, domain: str = "source") -> str:
    """Caption for an attribute tuple. A pure function of its arguments.

    Body-zone phrases are permuted; different template indices always give different orders.
    """
    key = [seed, template] + [PALETTE_INDEX.get(attrs[z], 99) for z in ZONES]
    rng = np.random.default_rng(key)
    frames = _TARGET_TEMPLATES if domain == "target" else _TEMPLATES
    perms = list(itertools.permutations(range(4)))
    base = int(np.random.default_rng([seed] + key[2:]).integers(len(perms)))
    order = perms[(base + 5 * template) % len(perms)]
    phrases = []
    for zone in ("hat", "shirt", "pants", "shoes"):
        noun = ZONE_NOUNS[zone][int(rng.integers(len(ZONE_NOUNS[zone])))]
        art = "a " if zone in ("hat", "shirt") else ""
        phrases.append(f"{art}{attrs[zone]} {noun}")
    text = frames[template % len(frames)].format(*(phrases[i] for i in order))
    if attrs["bag"] != "none":
        text += " " + _BAG_SENTENCES[int(rng.integers(len(_BAG_SENTENCES)))].format(f"a {attrs['bag']} bag")
    return text


def _shift(rgb: tuple[int, int, int], domain: str) -> np.ndarray:
    c = np.array(rgb, dtype=np.float64)
    if domain == "target":
        # warm tint and reduced contrast
        c = 0.8 * c + np.array([30.0, 15.0, -10.0])
    return np.clip(c, 0, 255)


def render_person(attrs: dict[str, str], rng: np.random.Generator,
                  size: tuple[int, int] = (96, 32), domain: str = "source") -> np.ndarray:
    """Rasterize an attribute tuple into an H x W x 3 uint8 image with per-image jitter."""
    h0, w0 = size
    sy, sx = h0 / 96.0, w0 / 32.0
    bg = rng.uniform(70, 190) + rng.uniform(-25, 25, size=3)
    img = np.tile(bg, (h0, w0, 1))
    dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))

    def fill(top, bottom, left, right, rgb):
        r0, r1 = int(round((top + dy) * sy)), int(round((bottom + dy) * sy))
        c0, c1 = int(round((left + dx) * sx)), int(round((right + dx) * sx))
        img[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = _shift(rgb, domain)

    fill(*_ROWS["hat"], 10, 22, PALETTE[attrs["hat"]])
    fill(*_ROWS["face"], 11, 21, _SKIN)
    fill(*_ROWS["shirt"], 7, 25, PALETTE[attrs["shirt"]])
    fill(*_ROWS["pants"], 9, 23, PALETTE[attrs["pants"]])
    fill(*_ROWS["shoes"], 8, 24, PALETTE[attrs["shoes"]])
    if attrs["bag"] != "none":
        top = int(rng.integers(34, 66))
        left = 1 if rng.random() < 0.5 else 24
        fill(top, top + 9, left, left + 7, PALETTE[attrs["bag"]])
    img += rng.normal(0.0, 6.0, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic procedural corpus: (train, test) with disjoint identities.

    Each identity has a unique attribute tuple; image j of identity p gets captions with
    template indices p + j*c, ..., p + j*c + c - 1 (mod the template count) for c captions
    per image, so the captions of one identity are distinct while templates last.
    """
    if spec.identities < 2 or spec.images_per_identity < 2:
        raise DataError("need at least 2 identities and 2 images per identity")
    if not 0 <= spec.test_identities < spec.identities:
        raise DataError("test_identities must leave at least one training identity")
    if spec.identities > spec.inventory_size:
        raise DataError(
            f"attribute inventory holds {spec.inventory_size} tuples, "
            f"{spec.identities} identities requested"
        )
    unknown = [c for c in (*spec.colors, *spec.bag_colors) if c != "none" and c not in PALETTE]
    if unknown:
        raise DataError(f"unknown colors {unknown}")
    rng = np.random.default_rng([spec.seed, 0])
    picks = rng.choice(spec.inventory_size, size=spec.identities, replace=False)
    n_templates = len(_TARGET_TEMPLATES if spec.domain == "target" else _TEMPLATES)
    records = []
    for pid, pick in enumerate(picks):
        attrs = _attribute_tuple(int(pick), spec)
        for j in range(spec.images_per_identity):
            img_rng = np.random.default_rng([spec.seed, 1, pid, j])
            pixels = render_person(attrs, img_rng, spec.image_size, spec.domain)
            captions = [synthetic_caption(attrs, (pid + j * spec.captions_per_image + c) % n_templates,
                                          spec.seed, spec.domain)
                        for c in range(spec.captions_per_image)]
            records.append(DatasetRecord(pid, f"images/{pid:05d}_{j:02d}.png", captions,
                                         pixels=pixels, attributes=attrs))
    n_train = (spec.identities - spec.test_identities) * spec.images_per_identity
    return records[:n_train], records[n_train:]


def write_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    train, test = generate_synthetic(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, {"train": train, "test": test})
    return manifest
