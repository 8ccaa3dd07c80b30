"""Acoustic and text front ends: log Mel-filterbank frames and character one-hots."""

import logging
import re
import unicodedata
from dataclasses import dataclass

import numpy as np

from mvawe.errors import ValidationError

log = logging.getLogger(__name__)

ALPHABET = "abcdefghijklmnopqrstuvwxyz"
N_CHARS = len(ALPHABET)
N_MELS = 40

DIGIT_WORDS = ("zero", "one", "two", "three", "four",
               "five", "six", "seven", "eight", "nine")

_WORD_RE = re.compile(r"^[a-z]+$")
_DROP_RE = re.compile(r"[^a-z\s]")


@dataclass
class AcousticSegment:
    frames: np.ndarray  # (T, 40)
    source_id: str = ""
    frame_period_ms: float = 10.0
    window_ms: float = 25.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != N_MELS:
            raise ValidationError(f"segment {self.source_id!r}: expected (T, {N_MELS}) frames, got {f.shape}")
        if f.shape[0] < 1:
            raise ValidationError(f"segment {self.source_id!r}: empty segment")
        if not np.isfinite(f).all():
            raise ValidationError(f"segment {self.source_id!r}: non-finite features")
        self.frames = f

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class TextLabel:
    text: str
    onehot: np.ndarray  # (W, 26)

    def __len__(self):
        return len(self.text)


def normalize_text(raw):
    """Lowercase, spell digits one by one, strip punctuation, split into words.

    >>> normalize_text("It's 7 o'clock.")
    ['its', 'seven', 'oclock']
    """
    text = unicodedata.normalize("NFKD", raw)
    text = "".join(ch for ch in text if not unicodedata.combining(ch)).lower()
    text = re.sub(r"\d", lambda m: DIGIT_WORDS[int(m.group())], text)
    words = []
    dropped = 0
    for token in text.split():
        word = _DROP_RE.sub("", token)
        if word:
            words.append(word)
        else:
            dropped += 1
    if dropped:
        log.warning("normalize_text dropped %d token(s) that normalized to nothing", dropped)
    return words


def one_hot_encode(word):
    if not isinstance(word, str) or not _WORD_RE.match(word):
        raise ValidationError(f"word {word!r} is not a non-empty string over a-z")
    idx = np.frombuffer(word.encode("ascii"), dtype=np.uint8) - ord("a")
    onehot = np.zeros((len(word), N_CHARS))
    onehot[np.arange(len(word)), idx] = 1.0
    return TextLabel(word, onehot)


def decode_onehot(onehot):
    """Argmax each row back to a character string."""
    return "".join(ALPHABET[i] for i in np.argmax(np.asarray(onehot), axis=1))


@dataclass(frozen=True)
class FbankConfig:
    n_mels: int = N_MELS
    window_ms: float = 25.0
    hop_ms: float = 10.0
    nfft: int = 512
    log_floor: float = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def filter_edges(sample_rate_hz, n_mels=N_MELS):
    """(left, center, right) frequencies in Hz of each triangular filter."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    return np.stack([pts[:-2], pts[1:-1], pts[2:]], axis=1)


def mel_filterbank_matrix(sample_rate_hz, nfft, n_mels=N_MELS):
    """(n_mels, nfft//2 + 1) triangular weights evaluated at the FFT bin frequencies."""
    freqs = np.arange(nfft // 2 + 1) * sample_rate_hz / nfft
    edges = filter_edges(sample_rate_hz, n_mels)
    left, center, right = edges[:, :1], edges[:, 1:2], edges[:, 2:]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def frame_params(sample_rate_hz, cfg=FbankConfig()):
    window = int(round(cfg.window_ms * sample_rate_hz / 1000.0))
    hop = int(round(cfg.hop_ms * sample_rate_hz / 1000.0))
    nfft = cfg.nfft
    while nfft < window:
        nfft *= 2
    return window, hop, nfft


def num_frames(n_samples, sample_rate_hz, cfg=FbankConfig()):
    window, hop, _ = frame_params(sample_rate_hz, cfg)
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def mel_filterbank(samples, sample_rate_hz, source_id="", cfg=FbankConfig()):
    """Log Mel-filterbank energies over 25 ms Hamming frames every 10 ms."""
    if sample_rate_hz < 8000:
        raise ValidationError(f"sample rate {sample_rate_hz} Hz below 8000 Hz")
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    window, hop, nfft = frame_params(sample_rate_hz, cfg)
    n = num_frames(x.size, sample_rate_hz, cfg)
    if n < 1:
        raise ValidationError(f"waveform of {x.size} samples shorter than one {window}-sample window")
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    frames = x[idx] * np.hamming(window)
    power = np.abs(np.fft.rfft(frames, nfft, axis=1)) ** 2
    energy = power @ mel_filterbank_matrix(sample_rate_hz, nfft, cfg.n_mels).T
    feats = np.log(np.maximum(energy, cfg.log_floor))
    return AcousticSegment(feats, source_id=source_id, frame_period_ms=cfg.hop_ms, window_ms=cfg.window_ms)
