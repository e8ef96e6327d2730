"""Model container format.

A model file is a zip archive (stored, fixed timestamps so equal models give
equal bytes) with two kinds of members:

``graph.json``
    ``{"format": "rlcompress-model", "version": 1, "name": str,
    "input_shape": [C, H, W], "meta": {...}, "layers": [...]}``.  Each layer
    entry has ``id``, ``kind``, ``inputs`` (ids, ``"input"`` for the network
    input) and, by kind: conv2d ``in_channels, out_channels, kernel [kh, kw],
    stride, padding, depthwise, bias``; linear ``in_channels, out_channels,
    bias``; activation ``activation``.  A conv/linear entry may carry
    ``"batchnorm": {"eps": float}``.

``blobs/<layer id>.<name>``
    Raw little-endian float32 arrays, C order, no header.  ``weight`` (OIHW
    for conv, out x in for linear), ``bias``, and for batch-normalised layers
    ``bn_gamma``, ``bn_beta``, ``bn_mean``, ``bn_var``.  Batch-norm is folded
    into weight/bias at load time.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .graph import Layer, ModelFormatError, ModelGraph, ShapeError

FORMAT = "rlcompress-model"
VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _read_blob(zf: zipfile.ZipFile, name: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        raw = zf.read(f"blobs/{name}")
    except KeyError:
        raise ModelFormatError(f"missing blob {name!r}") from None
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ShapeError(f"blob {name!r} holds {arr.size} values, expected {expected}")
    return arr.reshape(shape).astype(np.float32)


def _fold_batchnorm(weight, bias, gamma, beta, mean, var, eps):
    scale = gamma / np.sqrt(var + eps)
    w = weight * scale.reshape((-1,) + (1,) * (weight.ndim - 1))
    b = (bias if bias is not None else 0.0) - mean
    return w.astype(np.float32), (b * scale + beta).astype(np.float32)


def parse_model(data: bytes) -> ModelGraph:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
        desc = json.loads(zf.read("graph.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"not a model container: {exc}") from None
    if desc.get("format") != FORMAT or desc.get("version") != VERSION:
        raise ModelFormatError("unsupported model format or version")
    layers = []
    try:
        for entry in desc["layers"]:
            kind = entry["kind"]
            layer = Layer(id=entry["id"], kind=kind, inputs=list(entry["inputs"]))
            if kind in ("conv2d", "linear"):
                layer.in_channels = int(entry["in_channels"])
                layer.out_channels = int(entry["out_channels"])
            if kind == "conv2d":
                layer.kernel = tuple(int(k) for k in entry["kernel"])
                layer.stride = int(entry.get("stride", 1))
                layer.padding = int(entry.get("padding", 0))
                layer.depthwise = bool(entry.get("depthwise", False))
            if kind == "activation":
                layer.activation = entry.get("activation", "relu")
            if kind in ("conv2d", "linear"):
                layer.weight = _read_blob(zf, f"{layer.id}.weight", layer.weight_shape())
                if entry.get("bias", True):
                    layer.bias = _read_blob(zf, f"{layer.id}.bias", (layer.out_channels,))
                bn = entry.get("batchnorm")
                if bn is not None:
                    c = (layer.out_channels,)
                    stats = [_read_blob(zf, f"{layer.id}.bn_{k}", c) for k in ("gamma", "beta", "mean", "var")]
                    layer.weight, layer.bias = _fold_batchnorm(
                        layer.weight, layer.bias, *stats, float(bn.get("eps", 1e-5))
                    )
            layers.append(layer)
        return ModelGraph(
            layers,
            input_shape=tuple(desc["input_shape"]),
            name=desc.get("name", "model"),
            meta=desc.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model description: {exc!r}") from None


def load_model(path: str | Path) -> ModelGraph:
    return parse_model(Path(path).read_bytes())


def serialize_model(graph: ModelGraph) -> bytes:
    desc = {
        "format": FORMAT,
        "version": VERSION,
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "meta": graph.meta,
        "layers": graph.structure(),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name: str, payload: bytes) -> None:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)

        put("graph.json", json.dumps(desc, indent=1, sort_keys=True).encode())
        for layer in graph.compute_layers():
            put(f"blobs/{layer.id}.weight", np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
            if layer.bias is not None:
                put(f"blobs/{layer.id}.bias", np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return buf.getvalue()


def save_model(graph: ModelGraph, path: str | Path) -> None:
    Path(path).write_bytes(serialize_model(graph))
