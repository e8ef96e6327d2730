from .costs import LayerCost, Totals, count_macs, count_params, layer_costs, model_totals
from .executor import backward, forward, predict_logits
from .graph import (
    INPUT_ID,
    Layer,
    ModelFormatError,
    ModelGraph,
    ShapeError,
    channel_source,
    check_mix_support,
    detect_dependency_groups,
)
from .io import load_model, parse_model, save_model, serialize_model
from .tinyresnet import build_tinyresnet

__all__ = [
    "INPUT_ID",
    "Layer",
    "LayerCost",
    "ModelFormatError",
    "ModelGraph",
    "ShapeError",
    "Totals",
    "backward",
    "build_tinyresnet",
    "channel_source",
    "check_mix_support",
    "count_macs",
    "count_params",
    "detect_dependency_groups",
    "forward",
    "layer_costs",
    "load_model",
    "model_totals",
    "parse_model",
    "predict_logits",
    "save_model",
    "serialize_model",
]
