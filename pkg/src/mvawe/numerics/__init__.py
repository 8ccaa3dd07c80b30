from mvawe.numerics.adam import AdamState, adam_update
from mvawe.numerics.checkpoint import load_tensors, save_tensors
from mvawe.numerics.gradcheck import gradient_check
from mvawe.numerics.lstm import LSTMParams, init_lstm, lstm_cell, lstm_sequence, lstm_sequences, lstm_step
from mvawe.numerics.tensor import Tape, Tensor, as_tensor, backward

__all__ = [
    "AdamState", "adam_update", "load_tensors", "save_tensors", "gradient_check",
    "LSTMParams", "init_lstm", "lstm_cell", "lstm_sequence", "lstm_sequences", "lstm_step",
    "Tape", "Tensor", "as_tensor", "backward",
]
