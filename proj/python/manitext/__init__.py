"""Text-guided shape editing with parameter-free word-level feedback."""

from ._core import (
    Editor,
    Scene,
    Vocabulary,
    attention_maps,
    correlate,
    default_vocabulary,
    feedback_loss,
    fid_proxy,
    label_words,
    load_ppm,
    save_ppm,
    tokenize,
    word_presence,
)

__all__ = [
    "Editor",
    "Scene",
    "Vocabulary",
    "attention_maps",
    "correlate",
    "default_vocabulary",
    "feedback_loss",
    "fid_proxy",
    "label_words",
    "load_ppm",
    "save_ppm",
    "tokenize",
    "word_presence",
]
