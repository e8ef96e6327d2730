"""The bundled reference model and its dataset."""
from __future__ import annotations

from functools import lru_cache
from importlib import resources

from .data import Dataset, generate
from .model.graph import ModelGraph
from .model.io import parse_model

MODEL_RESOURCE = "assets/tinyresnet.rlcm"


def bundled_model_bytes() -> bytes:
    return resources.files("rlcompress").joinpath(MODEL_RESOURCE).read_bytes()


def load_bundled_model() -> ModelGraph:
    """A fresh copy of the trained TinyResNet shipped with the package."""
    return parse_model(bundled_model_bytes())


@lru_cache(maxsize=2)
def _dataset(seed: int) -> Dataset:
    return generate(seed)


def bundled_dataset() -> Dataset:
    """The dataset the bundled model was trained on (regenerated from its seed)."""
    seed = int(load_bundled_model().meta.get("data_seed", 0))
    return _dataset(seed)
