"""LAFF text-to-video retrieval: fusion blocks, training and evaluation.

Configs are plain dicts with the same keys as the JSON run configs.
"""

import json

from . import _core
from ._core import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    NumericError,
    UnsupportedError,
    mean_ap,
    median_rank,
    recall_at_k,
    triplet_loss,
)

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "DimensionError",
    "FormatError",
    "Model",
    "NumericError",
    "UnsupportedError",
    "default_run_config",
    "mean_ap",
    "median_rank",
    "param_count",
    "recall_at_k",
    "run",
    "synth",
    "triplet_loss",
]


def param_count(config):
    return _core.param_count(json.dumps(config))


def default_run_config():
    return json.loads(_core.default_run_config())


def synth(out_dir, spec=None, seed=2022, binary=True):
    """Writes a synthetic dataset under out_dir and returns the manifest path."""
    return _core.synth(json.dumps(spec or {}), str(out_dir), seed, binary)


def run(*args):
    """Same as the laff command line, in-process. Returns the exit code."""
    return _core.run_cli([str(a) for a in args])


class Model:
    """Multi-space fusion model. Feature arguments are lists in declaration order."""

    def __init__(self, config=None, seed=0, _core_model=None):
        self._m = _core_model if _core_model is not None else _core.Model(json.dumps(config), seed)

    @classmethod
    def load(cls, path):
        return cls(_core_model=_core.Model.load(str(path)))

    def save(self, path):
        self._m.save(str(path))

    @property
    def config(self):
        return json.loads(self._m.config_json)

    @property
    def spaces(self):
        return self._m.spaces

    def parameter_count(self):
        return self._m.parameter_count()

    def encode_video(self, features):
        return self._m.encode_video(list(features))

    def encode_text(self, features):
        return self._m.encode_text(list(features))

    def attention_weights(self, modality, features):
        return self._m.attention_weights(modality, list(features))

    def similarity(self, video_features, text_features):
        return self._m.similarity(list(video_features), list(text_features))
