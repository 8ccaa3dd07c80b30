"""Siamese acoustic/text encoders sharing one character decoder.

Both encoders are stacks of bidirectional LSTMs; an embedding is the
concatenation of the last forward and last backward hidden state of the
top layer. The decoder is a unidirectional LSTM stack whose layer-wise
initial states are the forward-direction final states of whichever
encoder produced the embedding. At each step it reads the embedding plus
the previous output distribution (all zeros at the first step) and emits a
softmax over characters through a two-stage linear projection.
"""

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mvawe.errors import ConfigurationError, DataError, UsageError, ValidationError
from mvawe.features import ALPHABET, N_CHARS, N_MELS, AcousticSegment, TextLabel
from mvawe.numerics import tensor as T
from mvawe.numerics.checkpoint import load_tensors, save_tensors
from mvawe.numerics.lstm import LSTMParams, init_lstm, lstm_sequences, lstm_step
from mvawe.numerics.tensor import Tensor

EOS = N_CHARS  # index of the end-of-word class when enabled


@dataclass
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    proj_dim: int = 128
    dropout: float = 0.4
    eos_enabled: bool = True
    teacher_forcing: bool = False
    input_dim: int = N_MELS

    @property
    def n_classes(self):
        return N_CHARS + 1 if self.eos_enabled else N_CHARS

    @property
    def embedding_dim(self):
        return 2 * self.hidden

    def validate(self):
        if self.layers < 1 or self.hidden < 1 or self.proj_dim < 1:
            raise ConfigurationError(f"layers/hidden/proj_dim must be positive: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout rate {self.dropout} outside [0, 1)")
        return self


@dataclass
class Embedding:
    values: np.ndarray
    source_view: str  # "acoustic" | "text"


@dataclass
class DecodedSequence:
    probs: np.ndarray  # (Y, K)
    argmax_text: str


@dataclass
class EncoderOutput:
    embedding: Tensor      # (B, 2H)
    final_states: list     # per layer forward-direction final [h, c], (B, 2H)

    @property
    def forward_states(self):
        """Per-layer ``(h, c)`` pairs of the forward direction's final state."""
        H = self.embedding.shape[-1] // 2
        return [(s[:, :H], s[:, H:]) for s in self.final_states]


@dataclass
class ModelParams:
    config: ModelConfig
    acoustic: list = field(default_factory=list)  # per layer (fwd, bwd) LSTMParams
    text: list = field(default_factory=list)
    decoder: list = field(default_factory=list)   # per layer LSTMParams
    proj_w1: Tensor = None
    proj_b1: Tensor = None
    proj_w2: Tensor = None
    proj_b2: Tensor = None

    def named_tensors(self):
        out = OrderedDict()
        for view, stack in (("acoustic", self.acoustic), ("text", self.text)):
            for l, (fwd, bwd) in enumerate(stack):
                for d, p in (("fwd", fwd), ("bwd", bwd)):
                    for n, t in zip("WUb", p.tensors()):
                        out[f"{view}.{l}.{d}.{n}"] = t
        for l, p in enumerate(self.decoder):
            for n, t in zip("WUb", p.tensors()):
                out[f"decoder.{l}.{n}"] = t
        out["proj.w1"] = self.proj_w1
        out["proj.b1"] = self.proj_b1
        out["proj.w2"] = self.proj_w2
        out["proj.b2"] = self.proj_b2
        for name, t in out.items():
            t.name = name
        return out

    def tensors(self):
        return list(self.named_tensors().values())

    def decoder_tensors(self):
        """Decoder LSTM and output projection parameters."""
        return [t for n, t in self.named_tensors().items() if n.startswith(("decoder.", "proj."))]

    def copy(self):
        return params_from_arrays(self.config, {n: t.data.copy() for n, t in self.named_tensors().items()})


def _zero_lstm(input_size, hidden):
    return LSTMParams(Tensor(np.zeros((input_size, 4 * hidden)), True),
                      Tensor(np.zeros((hidden, 4 * hidden)), True),
                      Tensor(np.zeros(4 * hidden), True))


def init_params(config, rng):
    """Random initialization (uniform +-1/sqrt(fan_in), zero biases, forget bias 1)."""
    config.validate()
    H, K = config.hidden, config.n_classes

    def bilstm_stack(input_size):
        stack = []
        for l in range(config.layers):
            d = input_size if l == 0 else 2 * H
            stack.append((init_lstm(d, H, rng), init_lstm(d, H, rng)))
        return stack

    def linear(fan_in, fan_out):
        b = 1.0 / np.sqrt(fan_in)
        return (Tensor(rng.uniform(-b, b, size=(fan_in, fan_out)), True),
                Tensor(np.zeros(fan_out), True))

    acoustic = bilstm_stack(config.input_dim)
    text = bilstm_stack(N_CHARS)
    decoder = [init_lstm(2 * H + K if l == 0 else H, H, rng) for l in range(config.layers)]
    w1, b1 = linear(H, config.proj_dim)
    w2, b2 = linear(config.proj_dim, K)
    return ModelParams(config, acoustic, text, decoder, w1, b1, w2, b2)


def zero_params(config):
    config.validate()
    H, K = config.hidden, config.n_classes
    z = lambda *s: Tensor(np.zeros(s), True)
    return ModelParams(
        config,
        [(_zero_lstm(config.input_dim if l == 0 else 2 * H, H),
          _zero_lstm(config.input_dim if l == 0 else 2 * H, H)) for l in range(config.layers)],
        [(_zero_lstm(N_CHARS if l == 0 else 2 * H, H),
          _zero_lstm(N_CHARS if l == 0 else 2 * H, H)) for l in range(config.layers)],
        [_zero_lstm(2 * H + K if l == 0 else H, H) for l in range(config.layers)],
        z(H, config.proj_dim), z(config.proj_dim), z(config.proj_dim, K), z(K))


def params_from_arrays(config, arrays):
    params = zero_params(config)
    named = params.named_tensors()
    missing = set(named) - set(arrays)
    if missing:
        raise DataError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for name, t in named.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != t.shape:
            raise ConfigurationError(f"tensor {name}: checkpoint shape {arr.shape} != model {t.shape}")
        t.data = arr.copy()
    return params


def save_model(path, params):
    path = Path(path)
    save_tensors(path, OrderedDict((n, t.data) for n, t in params.named_tensors().items()))
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(asdict(params.config), indent=2, sort_keys=True) + "\n")


def load_model(path):
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise DataError(f"missing hyperparameter sidecar {sidecar}")
    config = ModelConfig(**json.loads(sidecar.read_text()))
    return params_from_arrays(config, load_tensors(path))


# -- encoders ----------------------------------------------------------------

def _pad(seqs, dim):
    lengths = np.array([s.shape[0] for s in seqs])
    if lengths.min() < 1:
        raise ValidationError("empty input sequence")
    B, Tn = len(seqs), int(lengths.max())
    x = np.zeros((B, Tn, dim))
    for b, s in enumerate(seqs):
        if s.shape[1] != dim:
            raise ConfigurationError(f"input feature dim {s.shape[1]} != {dim}")
        x[b, :s.shape[0]] = s
    mask = (np.arange(Tn)[None, :] < lengths[:, None]).astype(np.float64)
    rev = np.where(mask > 0, lengths[:, None] - 1 - np.arange(Tn)[None, :], np.arange(Tn)[None, :])
    return x, mask, rev


def encode_sequences(seqs, stack, input_dim, dropout_rate=0.0, rng=None, input_dropout=True):
    """Bidirectional encoder over a list of (T_i, D) arrays.

    Each sequence is processed at its own length: padding never reaches a
    valid state. Dropout is applied to every layer input, except the first
    layer's when ``input_dropout`` is False.
    """
    if not seqs:
        raise UsageError("nothing to encode")
    x, mask, rev = _pad(seqs, input_dim)
    B, Tn = mask.shape
    H = stack[0][0].hidden
    bidx = np.arange(B)[:, None]
    inp = T.as_tensor(x)
    states = []
    for l, (fwd_p, bwd_p) in enumerate(stack):
        if l > 0 or input_dropout:
            inp = T.dropout(inp, dropout_rate, rng)
        # both directions in one op; the backward one reads each sequence reversed
        both = lstm_sequences([inp, inp[bidx, rev]], mask, [fwd_p, bwd_p])
        states.append(both[0, :, Tn - 1])
        if l < len(stack) - 1:
            inp = T.concat([both[0, :, :, :H], both[1, bidx, rev, :H]], axis=-1)
    # last hidden state of each direction, concatenated per row
    last_h = T.transpose(both[:, :, Tn - 1, :H], (1, 0, 2))
    return EncoderOutput(T.reshape(last_h, (B, 2 * H)), states)


def _rng_for(mode, rng):
    if mode == "eval":
        return None
    if mode != "train":
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise UsageError("train mode needs a seeded dropout generator")
    return rng


def encode_acoustic_batch(segments, params, mode="eval", rng=None):
    cfg = params.config
    seqs = [s.frames if isinstance(s, AcousticSegment) else np.asarray(s, dtype=np.float64) for s in segments]
    return encode_sequences(seqs, params.acoustic, cfg.input_dim, cfg.dropout, _rng_for(mode, rng))


def encode_text_batch(labels, params, mode="eval", rng=None):
    cfg = params.config
    seqs = [c.onehot if isinstance(c, TextLabel) else np.asarray(c, dtype=np.float64) for c in labels]
    return encode_sequences(seqs, params.text, N_CHARS, cfg.dropout, _rng_for(mode, rng),
                            input_dropout=False)


def encode_acoustic(x, params, mode="eval", rng=None):
    if len(x) == 0:
        raise ValidationError("acoustic segment has no frames")
    out = encode_acoustic_batch([x], params, mode, rng)
    return Embedding(out.embedding.data[0].copy(), "acoustic")


def encode_text(c, params, mode="eval", rng=None):
    if len(c) == 0:
        raise ValidationError("text label is empty")
    out = encode_text_batch([c], params, mode, rng)
    return Embedding(out.embedding.data[0].copy(), "text")


# -- decoder -----------------------------------------------------------------

def target_matrix(label, eos_enabled):
    """One-hot decoder target, with a trailing end-of-word row when enabled."""
    onehot = label.onehot if isinstance(label, TextLabel) else np.asarray(label)
    if not eos_enabled:
        return onehot
    W = onehot.shape[0]
    out = np.zeros((W + 1, N_CHARS + 1))
    out[:W, :N_CHARS] = onehot
    out[W, EOS] = 1.0
    return out


def decode_batch(embedding, init_states, steps, params, rng=None, teacher=None):
    """Run the shared decoder for ``steps`` steps; returns (B, steps, K) probabilities.

    ``init_states`` holds one initial state per decoder layer, either a
    combined (B, 2H) ``[h, c]`` tensor or an ``(h, c)`` pair.

    ``teacher`` (B, >=steps, K), when given, replaces the fed-back prediction
    with the target row of the previous step.
    """
    if steps < 1:
        raise UsageError("decoder needs at least one step")
    cfg = params.config
    K = cfg.n_classes
    B = embedding.shape[0]
    if len(init_states) != len(params.decoder):
        raise ConfigurationError("encoder and decoder layer counts differ")
    states = [T.concat(list(st), axis=-1) if isinstance(st, (tuple, list)) else st for st in init_states]
    prev = T.as_tensor(np.zeros((B, K)))
    H = cfg.hidden
    rows = []
    for y in range(steps):
        inp = T.concat([embedding, prev], axis=-1)
        for l, p in enumerate(params.decoder):
            inp = T.dropout(inp, cfg.dropout, rng)
            states[l] = lstm_step(inp, states[l], p)
            inp = states[l][:, :H]
        logits = T.affine(T.affine(inp, params.proj_w1, params.proj_b1), params.proj_w2, params.proj_b2)
        probs = T.softmax(logits, axis=-1)
        rows.append(probs)
        prev = T.as_tensor(teacher[:, y]) if teacher is not None else probs
    return T.stack(rows, axis=1)


def _argmax_text(probs, eos_enabled, length=None):
    idx = np.argmax(probs, axis=-1)
    chars = []
    for k in idx[:length] if length is not None else idx:
        if eos_enabled and k == EOS:
            break
        chars.append(ALPHABET[k])
    return "".join(chars)


def decode_embedding(e, encoder_forward_states, target_length_or_max, params, teacher_target=None):
    """Decode one embedding (eval mode) into a character distribution sequence.

    With end-of-word enabled the decoder runs up to ``target_length_or_max``
    steps and the text stops at the first end symbol; otherwise exactly that
    many characters are produced.
    """
    if target_length_or_max is None or target_length_or_max < 1:
        raise UsageError("decode needs a positive length (or maximum length)")
    cfg = params.config
    vec = e.values if isinstance(e, Embedding) else np.asarray(e)
    emb = T.as_tensor(vec.reshape(1, -1))
    states = [(T.as_tensor(np.asarray(h).reshape(1, -1)), T.as_tensor(np.asarray(c).reshape(1, -1)))
              for h, c in encoder_forward_states]
    teacher = None
    if teacher_target is not None or cfg.teacher_forcing:
        if teacher_target is None:
            raise UsageError("teacher forcing requires a target")
        teacher = target_matrix(teacher_target, cfg.eos_enabled)[None]
        target_length_or_max = min(target_length_or_max, teacher.shape[1])
    probs = decode_batch(emb, states, int(target_length_or_max), params, None, teacher).data[0]
    text = _argmax_text(probs, cfg.eos_enabled)
    if cfg.eos_enabled:
        stop = np.flatnonzero(np.argmax(probs, axis=-1) == EOS)
        if stop.size:
            probs = probs[:stop[0] + 1]
    return DecodedSequence(probs.copy(), text)


# -- bulk inference ------------------------------------------------------------

def _chunks(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _map_chunks(fn, n, batch_size, workers):
    """Apply ``fn`` to fixed slices of ``range(n)``; chunking never depends on ``workers``."""
    slices = list(_chunks(n, batch_size))
    if workers <= 1 or len(slices) <= 1:
        return [fn(sl) for sl in slices]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, slices))


def embed_segments(segments, params, batch_size=256, workers=1):
    """Eval-mode acoustic embeddings, (n, 2H)."""
    out = np.empty((len(segments), params.config.embedding_dim))
    parts = _map_chunks(lambda sl: encode_acoustic_batch(segments[sl], params).embedding.data,
                        len(segments), batch_size, workers)
    for sl, part in zip(_chunks(len(segments), batch_size), parts):
        out[sl] = part
    return out


def embed_words(words, params, batch_size=256, workers=1):
    """Eval-mode text embeddings for a list of normalized words, (n, 2H)."""
    from mvawe.features import one_hot_encode
    labels = [one_hot_encode(w) for w in words]
    out = np.empty((len(labels), params.config.embedding_dim))
    parts = _map_chunks(lambda sl: encode_text_batch(labels[sl], params).embedding.data,
                        len(labels), batch_size, workers)
    for sl, part in zip(_chunks(len(labels), batch_size), parts):
        out[sl] = part
    return out


def recognize_segments(segments, params, lengths=None, max_len=20, batch_size=256):
    """Greedy decode of acoustic embeddings into words.

    Without an end-of-word class, per-item ``lengths`` are mandatory.
    """
    cfg = params.config
    if not cfg.eos_enabled and lengths is None:
        raise UsageError("strict 26-class decoding needs externally supplied lengths")
    if lengths is not None:
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (len(segments),) or np.any(lengths < 1):
            raise UsageError("lengths must give one positive length per segment")
    texts = []
    for sl in _chunks(len(segments), batch_size):
        enc = encode_acoustic_batch(segments[sl], params)
        if cfg.eos_enabled:
            steps = max_len + 1
        else:
            steps = int(max(lengths[sl]))
        probs = decode_batch(enc.embedding, enc.final_states, steps, params).data
        for b in range(probs.shape[0]):
            n = None if cfg.eos_enabled else int(lengths[sl][b])
            texts.append(_argmax_text(probs[b], cfg.eos_enabled, n))
    return texts
