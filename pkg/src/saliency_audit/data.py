"""Dataset ingestion: MNIST-format IDX files, synthetic image digits, a
generated sentiment corpus, and whitespace tokenization.

The synthetic generators exist so the full audit pipeline runs with no
downloads: the digit corpus renders ten segment-glyph classes with jitter and
noise (learnable by the small conv net, chance-level under label
randomization), and the sentiment corpus fills sentence templates from
positive/negative lexicons.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from saliency_audit.seeds import rng_for
from saliency_audit.tensor import Tensor

__all__ = [
    "Dataset",
    "DataError",
    "Vocab",
    "load_mnist_idx",
    "write_mnist_idx",
    "synthetic_digits",
    "generate_synthetic_text",
    "load_sentiment_tsv",
    "tokenize",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class DataError(ValueError):
    pass


@dataclass
class Vocab:
    """Token table with fixed pad/unk/start slots and a padded sequence length.

    Sequences begin with the start token; classifiers pool from that position,
    and attribution baselines share it so the pooled slot carries no input
    signal of its own.
    """

    tokens: list[str]
    max_len: int = 16
    ids: dict[str, int] = field(default_factory=dict, repr=False)

    PAD = "<pad>"
    UNK = "<unk>"
    START = "<s>"

    def __post_init__(self):
        if self.tokens[:3] != [self.PAD, self.UNK, self.START]:
            raise DataError("vocab must start with the pad, unk and start tokens")
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def start_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Dataset:
    task: str                              # "image" | "text"
    train: list[tuple[Tensor, int]]
    test: list[tuple[Tensor, int]]
    num_classes: int
    vocab: Vocab | None = None

    def __post_init__(self):
        if self.task not in ("image", "text"):
            raise DataError(f"unknown task '{self.task}'")
        for x, label in self.train + self.test:
            if not (0 <= label < self.num_classes):
                raise DataError(f"label {label} outside [0, {self.num_classes})")
            if self.task == "image":
                arr = x.array
                if arr.min() < 0.0 or arr.max() > 1.0:
                    raise DataError("image pixels must lie in [0, 1]")
            else:
                if self.vocab is None:
                    raise DataError("text dataset needs a vocab")
                if np.any(x.array >= len(self.vocab)) or np.any(x.array < 0):
                    raise DataError("token id outside vocab")


# ---------------------------------------------------------------------------
# IDX binary format


def _read_be32(fh) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise DataError("file truncated while reading header")
    return struct.unpack(">i", raw)[0]


def load_mnist_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Parse an IDX image/label file pair into an image Dataset (train split).

    Pixels are scaled to [0, 1]. ``limit`` truncates the item count.
    """
    with open(images_path, "rb") as fh:
        magic = _read_be32(fh)
        if magic != IMAGE_MAGIC:
            raise DataError(f"bad magic {magic} in image file (want {IMAGE_MAGIC})")
        count, rows, cols = _read_be32(fh), _read_be32(fh), _read_be32(fh)
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise DataError(f"image file truncated: expected {count} {rows}x{cols} images")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as fh:
        magic = _read_be32(fh)
        if magic != LABEL_MAGIC:
            raise DataError(f"bad magic {magic} in label file (want {LABEL_MAGIC})")
        n_labels = _read_be32(fh)
        raw = fh.read(n_labels)
        if len(raw) != n_labels:
            raise DataError("label file truncated")
        labels = np.frombuffer(raw, dtype=np.uint8)

    if n_labels != count:
        raise DataError(f"count mismatch: {count} images vs {n_labels} labels")
    if limit is not None:
        count = min(count, limit)
    items = [
        (Tensor(images[i].astype(np.float64)[None, :, :] / 255.0), int(labels[i]))
        for i in range(count)
    ]
    num_classes = max((lbl for _, lbl in items), default=-1) + 1
    return Dataset("image", items, [], max(num_classes, 2))


def write_mnist_idx(items, images_path, labels_path) -> None:
    """Emit (image tensor in [0,1], label) pairs as an IDX file pair.

    Pixel bytes are round(value*255); the inverse of the loader's scaling.
    """
    arrays = [np.asarray(x.array if isinstance(x, Tensor) else x) for x, _ in items]
    labels = [label for _, label in items]
    if not arrays:
        rows = cols = 0
    else:
        first = arrays[0]
        rows, cols = first.shape[-2], first.shape[-1]
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGE_MAGIC, len(arrays), rows, cols))
        for arr in arrays:
            pixels = np.clip(np.floor(arr.reshape(rows, cols) * 255.0 + 0.5), 0, 255)
            fh.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", LABEL_MAGIC, len(labels)))
        fh.write(bytes(int(l) for l in labels))


# ---------------------------------------------------------------------------
# synthetic digit glyphs

# seven-segment occupancy per digit: (top, upper-left, upper-right, middle,
# lower-left, lower-right, bottom)
_SEGMENTS = {
    0: (1, 1, 1, 0, 1, 1, 1),
    1: (0, 0, 1, 0, 0, 1, 0),
    2: (1, 0, 1, 1, 1, 0, 1),
    3: (1, 0, 1, 1, 0, 1, 1),
    4: (0, 1, 1, 1, 0, 1, 0),
    5: (1, 1, 0, 1, 0, 1, 1),
    6: (1, 1, 0, 1, 1, 1, 1),
    7: (1, 0, 1, 0, 0, 1, 0),
    8: (1, 1, 1, 1, 1, 1, 1),
    9: (1, 1, 1, 1, 0, 1, 1),
}


def _render_digit(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    img = np.zeros((size, size))
    # glyph box roughly 12x18, jittered placement
    x0 = 8 + int(rng.integers(-3, 4))
    y0 = 5 + int(rng.integers(-3, 4))
    w, h = 12, 18
    thick = 2 + int(rng.integers(0, 2))
    seg = _SEGMENTS[digit]
    bars = [
        (y0, x0, thick, w),                          # top
        (y0, x0, h // 2, thick),                     # upper-left
        (y0, x0 + w - thick, h // 2, thick),         # upper-right
        (y0 + h // 2 - thick // 2, x0, thick, w),    # middle
        (y0 + h // 2, x0, h // 2, thick),            # lower-left
        (y0 + h // 2, x0 + w - thick, h // 2, thick),  # lower-right
        (y0 + h - thick, x0, thick, w),              # bottom
    ]
    for on, (r, c, dh, dw) in zip(seg, bars):
        if on:
            img[max(r, 0) : r + dh, max(c, 0) : c + dw] = 1.0
    img = img[:size, :size]
    intensity = rng.uniform(0.7, 1.0)
    noisy = img * intensity + rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(noisy, 0.0, 1.0)


def synthetic_digits(n_train: int, n_test: int, seed: int = 0, size: int = 28) -> Dataset:
    """Ten-class digit-glyph image dataset with balanced labels."""
    rng = rng_for(seed, "digits")
    train, test = [], []
    for split, count in (("train", n_train), ("test", n_test)):
        bucket = train if split == "train" else test
        for i in range(count):
            label = i % 10
            img = _render_digit(label, rng, size)
            bucket.append((Tensor(img[None, :, :]), label))
    return Dataset("image", train, test, 10)


# ---------------------------------------------------------------------------
# synthetic sentiment corpus

_POSITIVE = ["great", "wonderful", "superb", "delightful", "brilliant", "charming", "excellent", "moving"]
_NEGATIVE = ["awful", "terrible", "boring", "dreadful", "clumsy", "tedious", "painful", "hollow"]
_SUBJECTS = ["the movie", "this film", "the plot", "the acting", "that script", "the ending"]
_FILLERS = ["overall", "frankly", "honestly", "somehow", "truly", "simply"]
_TAILS = ["from start to finish", "in every single scene", "for the whole runtime", "beyond any doubt"]


def generate_synthetic_text(seed: int, size: int, max_len: int = 16, test_fraction: float = 0.2) -> Dataset:
    """Template-generated binary sentiment corpus with balanced labels.

    Label 1 sentences carry positive lexicon words, label 0 negative ones.
    A third of the sentences negate the sentiment word ("was not great"),
    flipping the label, so bag-of-words shortcuts cap out well below full
    accuracy and the classifier has to track token positions. Deterministic
    per seed.
    """
    if size < 2:
        raise DataError("corpus size must be at least 2")
    rng = rng_for(seed, "text-corpus")
    sentences = []
    for i in range(size):
        label = i % 2
        negated = rng.uniform() < 1 / 3
        lexicon = _POSITIVE if (label == 1) != negated else _NEGATIVE
        subject = _SUBJECTS[rng.integers(len(_SUBJECTS))]
        word = lexicon[rng.integers(len(lexicon))]
        if negated:
            word = f"not {word}"
        filler = _FILLERS[rng.integers(len(_FILLERS))]
        tail = _TAILS[rng.integers(len(_TAILS))]
        form = rng.integers(3)
        if form == 0:
            text = f"{filler} {subject} was {word} {tail}"
        elif form == 1:
            text = f"{filler} speaking {subject} felt {word} {tail}"
        else:
            text = f"{subject} was {word} {tail} honestly"
        sentences.append((text, label))

    words = sorted({w for text, _ in sentences for w in text.lower().split()})
    vocab = Vocab([Vocab.PAD, Vocab.UNK, Vocab.START] + words, max_len=max_len)
    items = [(tokenize(text, vocab), label) for text, label in sentences]
    n_test = int(round(size * test_fraction))
    # deterministic interleaved split keeps labels balanced in both halves
    test = items[:n_test]
    train = items[n_test:]
    return Dataset("text", train, test, 2, vocab=vocab)


def load_sentiment_tsv(path, max_len: int = 16, test_fraction: float = 0.2) -> Dataset:
    """Load a user-supplied "sentence<TAB>label" file into a text Dataset."""
    sentences = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"line {line_no}: expected 'sentence<TAB>label'")
            text, label = line.rsplit("\t", 1)
            try:
                sentences.append((text, int(label)))
            except ValueError:
                raise DataError(f"line {line_no}: label '{label}' is not an integer") from None
    if len(sentences) < 2:
        raise DataError("need at least two sentences")
    words = sorted({w for text, _ in sentences for w in text.lower().split()})
    vocab = Vocab([Vocab.PAD, Vocab.UNK, Vocab.START] + words, max_len=max_len)
    items = [(tokenize(text, vocab), label) for text, label in sentences]
    n_classes = max(lbl for _, lbl in sentences) + 1
    n_test = int(round(len(items) * test_fraction))
    return Dataset("text", items[n_test:], items[:n_test], max(n_classes, 2), vocab=vocab)


def tokenize(text: str, vocab: Vocab) -> Tensor:
    """Lowercase whitespace tokenization, padded/truncated to vocab.max_len.

    The start token occupies position 0; content is truncated to fit.
    """
    ids = [vocab.ids.get(word, vocab.unk_id) for word in text.lower().split()]
    ids = [vocab.start_id] + ids[: vocab.max_len - 1]
    ids += [vocab.pad_id] * (vocab.max_len - len(ids))
    return Tensor(np.array(ids, dtype=np.float64))
