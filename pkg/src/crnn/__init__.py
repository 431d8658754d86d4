"""Convolutional-recurrent sequence recognition with CTC transcription."""

from .ctc import Alphabet, FrameDistributions, ctc_loss, sequence_probability
from .decoding import BKTree, Lexicon, best_path_decode, bk_build, bk_query, \
    edit_distance, lexicon_decode
from .model import Model, ModelConfig, build, load, preset_simplified, \
    preset_standard, save
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Alphabet", "BKTree", "FrameDistributions", "Lexicon", "Model",
    "ModelConfig", "Tensor", "best_path_decode", "bk_build", "bk_query",
    "build", "ctc_loss", "edit_distance", "lexicon_decode", "load",
    "preset_simplified", "preset_standard", "save", "sequence_probability",
]
