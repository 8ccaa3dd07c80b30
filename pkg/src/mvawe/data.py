"""Word-segment datasets on disk and a synthetic speech-like corpus.

A split is two files: ``<split>.bin`` (the bytes ``MVAWD1`` followed by
each record's T x 40 frames as little-endian float32) and ``<split>.json``
(the manifest: per-record word, source id, byte offset and frame count,
plus the blob's SHA-256).
"""

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mvawe.errors import ConfigurationError, DataError, ValidationError
from mvawe.features import ALPHABET, N_MELS, AcousticSegment, normalize_text, one_hot_encode

log = logging.getLogger(__name__)

BLOB_MAGIC = b"MVAWD1"
MANIFEST_VERSION = 1
SPLITS = ("train", "dev", "test")


@dataclass
class Record:
    word: str
    source_id: str
    offset: int
    frames: int


@dataclass
class DatasetManifest:
    split: str
    records: list
    blob: str
    sha256: str
    feature_dim: int = N_MELS
    version: int = MANIFEST_VERSION

    @property
    def vocabulary(self):
        return Counter(r.word for r in self.records)

    def to_json(self):
        vocab = self.vocabulary
        return {
            "format": BLOB_MAGIC.decode(),
            "version": self.version,
            "split": self.split,
            "blob": self.blob,
            "sha256": self.sha256,
            "feature_dim": self.feature_dim,
            "records": [asdict(r) for r in self.records],
            "vocabulary": {"size": len(vocab), "counts": dict(sorted(vocab.items()))},
        }


class Dataset:
    """A validated split whose segments are read lazily from the blob."""

    def __init__(self, manifest, blob_path):
        self.manifest = manifest
        self.blob_path = Path(blob_path)
        self._blob = None
        self._segments = None
        vocab = sorted(manifest.vocabulary)
        self.label_index = {w: i for i, w in enumerate(vocab)}

    def __len__(self):
        return len(self.manifest.records)

    @property
    def split(self):
        return self.manifest.split

    @property
    def words(self):
        return [r.word for r in self.manifest.records]

    @property
    def label_ids(self):
        return np.array([self.label_index[r.word] for r in self.manifest.records], dtype=np.int64)

    @property
    def vocabulary(self):
        return set(self.label_index)

    def _buffer(self):
        if self._blob is None:
            self._blob = np.memmap(self.blob_path, dtype=np.uint8, mode="r")
        return self._blob

    def segment(self, i):
        r = self.manifest.records[i]
        raw = self._buffer()[r.offset:r.offset + 4 * N_MELS * r.frames]
        frames = np.frombuffer(raw.tobytes(), dtype="<f4").reshape(r.frames, N_MELS)
        return AcousticSegment(frames.astype(np.float64), source_id=r.source_id)

    def segments(self):
        if self._segments is None:
            self._segments = [self.segment(i) for i in range(len(self))]
        return self._segments


def write_split(out_dir, split, items):
    """Write ``items`` = iterable of (word, source_id, frames) as one split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob_name = f"{split}.bin"
    records = []
    chunks = [BLOB_MAGIC]
    offset = len(BLOB_MAGIC)
    for word, source_id, frames in items:
        one_hot_encode(word)
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != N_MELS or frames.shape[0] < 1:
            raise ValidationError(f"record {source_id!r}: frames must be (T>=1, {N_MELS})")
        raw = np.ascontiguousarray(frames, dtype="<f4").tobytes()
        records.append(Record(word, source_id, offset, frames.shape[0]))
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    (out_dir / blob_name).write_bytes(blob)
    manifest = DatasetManifest(split, records, blob_name, hashlib.sha256(blob).hexdigest())
    (out_dir / f"{split}.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")
    return manifest


def _validate(manifest, blob, where):
    if blob[:len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise DataError(f"{where}: feature file lacks {BLOB_MAGIC!r} header")
    if hashlib.sha256(blob).hexdigest() != manifest.sha256:
        raise DataError(f"{where}: feature file checksum mismatch")
    seen = set()
    end_prev = len(BLOB_MAGIC)
    for r in sorted(manifest.records, key=lambda r: r.offset):
        if r.source_id in seen:
            raise DataError(f"{where}: duplicate source id {r.source_id!r}")
        seen.add(r.source_id)
        if normalize_text(r.word) != [r.word] or any(ch not in ALPHABET for ch in r.word):
            raise DataError(f"{where}: record {r.source_id!r} has non-normalized word {r.word!r}")
        if r.frames < 1:
            raise DataError(f"{where}: record {r.source_id!r} has no frames")
        end = r.offset + 4 * N_MELS * r.frames
        if r.offset < end_prev or end > len(blob):
            raise DataError(f"{where}: record {r.source_id!r} has bad offset/length "
                            f"({r.offset}+{end - r.offset} bytes, file {len(blob)} bytes)")
        end_prev = end


def load_dataset(path, split=None):
    """Load a split from its manifest path, or from ``(directory, split)``."""
    path = Path(path)
    if path.is_dir():
        if split is None:
            raise DataError(f"{path} is a directory; name a split")
        path = path / f"{split}.json"
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable manifest ({exc})") from exc
    if meta.get("format") != BLOB_MAGIC.decode() or meta.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest format/version")
    if meta.get("feature_dim") != N_MELS:
        raise DataError(f"{path}: feature_dim {meta.get('feature_dim')} != {N_MELS}")
    try:
        records = [Record(**r) for r in meta["records"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed record list ({exc})") from exc
    manifest = DatasetManifest(meta["split"], records, meta["blob"], meta["sha256"])
    blob_path = path.parent / manifest.blob
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise DataError(f"{blob_path}: unreadable feature file ({exc})") from exc
    _validate(manifest, blob, str(path))
    return Dataset(manifest, blob_path)


def load_corpus(directory, splits=SPLITS):
    return {s: load_dataset(directory, s) for s in splits}


# -- synthetic corpus ------------------------------------------------------------

@dataclass
class SynthConfig:
    """Synthetic word-segment corpus.

    Every character owns a random 40-dim prototype; a spoken instance is the
    sequence of its characters' prototypes, each held for a random number of
    frames, scaled by a global tempo factor, blurred across boundaries and
    perturbed by a per-instance offset and per-frame noise.

    With ``family_size`` > 1 the vocabulary comes in families: a random root
    plus variants that each differ from it in one substituted letter, so
    some word pairs are acoustically close.
    """
    vocab_size: int = 50
    samples_per_word: int = 20
    dev_samples_per_word: int = 4
    test_samples_per_word: int = 4
    oov_fraction: float = 0.1
    word_len_min: int = 3
    word_len_max: int = 7
    n_symbols: int = 26
    dur_mean: float = 4.0
    dur_std: float = 1.5
    jitter_std: float = 1.0
    offset_std: float = 0.5
    prototype_std: float = 1.0
    warp_range: float = 0.25
    family_size: int = 1
    seed: int = 0

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.samples_per_word < 2:
            raise ConfigurationError("samples_per_word must be >= 2")
        if min(self.dur_std, self.jitter_std, self.offset_std, self.prototype_std) < 0:
            raise ConfigurationError("standard deviations must be >= 0")
        if not 0 <= self.warp_range < 1 or self.dur_mean < 1:
            raise ConfigurationError("warp_range must be in [0, 1) and dur_mean >= 1")
        if not 0 <= self.oov_fraction < 1:
            raise ConfigurationError("oov_fraction must be in [0, 1)")
        if not 1 <= self.word_len_min <= self.word_len_max:
            raise ConfigurationError("bad word length range")
        if not 2 <= self.n_symbols <= 26:
            raise ConfigurationError("n_symbols must be in [2, 26]")
        if self.family_size < 1:
            raise ConfigurationError("family_size must be >= 1")
        return self

    @property
    def n_oov_words(self):
        return int(round(self.oov_fraction * self.vocab_size))


@dataclass
class SyntheticCorpus:
    config: SynthConfig
    iv_words: list
    oov_words: list
    prototypes: np.ndarray
    splits: dict = field(default_factory=dict)  # split -> list of (word, source_id, frames)


def _draw_words(rng, n, cfg):
    letters = np.array(list(ALPHABET[:cfg.n_symbols]))
    words = []
    seen = set()

    def keep(w):
        if w in seen or len(words) >= n:
            return False
        seen.add(w)
        words.append(w)
        return True

    while len(words) < n:
        length = int(rng.integers(cfg.word_len_min, cfg.word_len_max + 1))
        root = "".join(rng.choice(letters, size=length))
        if not keep(root):
            continue
        for _ in range(cfg.family_size - 1):
            pos = int(rng.integers(length))
            others = letters[letters != root[pos]]
            keep(root[:pos] + str(rng.choice(others)) + root[pos + 1:])
    if cfg.family_size > 1:
        words = [words[i] for i in rng.permutation(len(words))]
    return words


def synthesize_instance(word, prototypes, cfg, rng):
    tempo = rng.uniform(1.0 - cfg.warp_range, 1.0 + cfg.warp_range)
    blocks = []
    for ch in word:
        dur = max(1, int(round(rng.normal(cfg.dur_mean, cfg.dur_std) * tempo)))
        blocks.append(np.repeat(prototypes[ord(ch) - ord("a")][None, :], dur, axis=0))
    x = np.concatenate(blocks, axis=0)
    if x.shape[0] > 2:
        padded = np.concatenate([x[:1], x, x[-1:]], axis=0)
        x = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    x = x + rng.normal(0.0, cfg.offset_std, size=(1, N_MELS))
    return x + rng.normal(0.0, cfg.jitter_std, size=x.shape)


def generate_synthetic_corpus(cfg):
    """Deterministically build train/dev/test item lists (not yet written)."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    word_ss, proto_ss, inst_ss = root.spawn(3)
    words = _draw_words(np.random.default_rng(word_ss), cfg.vocab_size + cfg.n_oov_words, cfg)
    iv, oov = words[:cfg.vocab_size], words[cfg.vocab_size:]
    prototypes = np.random.default_rng(proto_ss).normal(0.0, cfg.prototype_std, size=(26, N_MELS))
    rng = np.random.default_rng(inst_ss)
    plan = (("train", iv, cfg.samples_per_word),
            ("dev", iv + oov, cfg.dev_samples_per_word),
            ("test", iv + oov, cfg.test_samples_per_word))
    corpus = SyntheticCorpus(cfg, iv, oov, prototypes)
    for split, vocab, count in plan:
        items = []
        for w in vocab:
            for k in range(count):
                items.append((w, f"{split}-{w}-{k:03d}", synthesize_instance(w, prototypes, cfg, rng)))
        corpus.splits[split] = items
    return corpus


def write_synthetic_corpus(cfg, out_dir):
    corpus = generate_synthetic_corpus(cfg)
    out_dir = Path(out_dir)
    manifests = {s: write_split(out_dir, s, items) for s, items in corpus.splits.items() if items}
    (out_dir / "synth.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    log.info("wrote synthetic corpus to %s: %s", out_dir,
             {s: len(m.records) for s, m in manifests.items()})
    return manifests


def read_segments_file(path):
    """Parse ``utt_id word start_sec end_sec`` lines; blank lines and ``#`` comments skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 'utt_id word start_sec end_sec'")
        utt, word, start, end = parts
        try:
            start, end = float(start), float(end)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad time value") from exc
        if not 0 <= start < end:
            raise DataError(f"{path}:{lineno}: need 0 <= start < end")
        rows.append((utt, word, start, end))
    return rows
