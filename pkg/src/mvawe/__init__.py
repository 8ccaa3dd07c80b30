"""Acoustic and text word embeddings trained jointly with a shared spelling decoder.

Submodules: ``numerics`` (autodiff, LSTM, Adam, checkpoints), ``features``,
``model``, ``losses``, ``sampling``, ``training``, ``evaluation``, ``data``
and ``cli``.
"""

from mvawe.errors import (ConfigurationError, DataError, MvaweError, NumericalError, UsageError,
                          ValidationError)

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DataError", "MvaweError", "NumericalError", "UsageError",
           "ValidationError", "__version__"]
