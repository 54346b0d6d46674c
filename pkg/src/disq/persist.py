"""Codebook and checkpoint files.

Codebooks travel as a DSQF centroid matrix plus a JSON sidecar carrying
provenance; checkpoints are a directory of one DSQF payload per parameter
tensor plus JSON metadata. Tensors are stored float32; logical shapes that
are not 2-D are recorded in the metadata and restored on load.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataio import FeatureSequence, read_feature_file, write_feature_file
from .fusion import FusionParams
from .model import HeadParams, ModelParams
from .quantize import Codebook


def save_codebook(cb: Codebook, base_path, extra: dict | None = None) -> None:
    """Write <base>.dsqf (centroids) and <base>.json (provenance)."""
    base = Path(base_path)
    write_feature_file(FeatureSequence(cb.centroids, stream_id=cb.stream_id), base.with_suffix(".dsqf"))
    sidecar = {
        "stream_id": cb.stream_id,
        "k": cb.k,
        "seed": cb.seed,
        "final_distortion": cb.final_distortion,
        "iterations_run": cb.iterations_run,
    }
    if extra:
        sidecar.update(extra)
    base.with_suffix(".json").write_text(
        json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_codebook(base_path) -> Codebook:
    base = Path(base_path)
    sidecar = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
    seq = read_feature_file(base.with_suffix(".dsqf"), stream_id=sidecar["stream_id"])
    centroids = seq.frames.astype(np.float64)
    if centroids.shape[0] != sidecar["k"]:
        raise ValueError(f"{base}: payload has {centroids.shape[0]} rows, sidecar says k={sidecar['k']}")
    return Codebook(
        centroids=centroids,
        stream_id=sidecar["stream_id"],
        k=int(sidecar["k"]),
        seed=int(sidecar["seed"]),
        final_distortion=float(sidecar["final_distortion"]),
        iterations_run=int(sidecar["iterations_run"]),
    )


def _as_matrix(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"cannot store tensor of rank {arr.ndim}")


def save_checkpoint(ckpt_dir, params: ModelParams, meta: dict) -> None:
    """Checkpoint = meta.json + params/<name>.dsqf, one payload per tensor."""
    ckpt_dir = Path(ckpt_dir)
    (ckpt_dir / "params").mkdir(parents=True, exist_ok=True)
    shapes = {}
    names = params.param_items() + [("head.class_weights", params.head.class_weights)]
    for name, arr in names:
        shapes[name] = list(arr.shape)
        write_feature_file(
            FeatureSequence(_as_matrix(arr), stream_id=name), ckpt_dir / "params" / f"{name}.dsqf"
        )
    doc = dict(meta)
    doc["param_shapes"] = shapes
    (ckpt_dir / "meta.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, dict]:
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / "meta.json").read_text(encoding="utf-8"))
    shapes = meta["param_shapes"]

    def tensor(name: str) -> np.ndarray:
        seq = read_feature_file(ckpt_dir / "params" / f"{name}.dsqf", stream_id=name)
        return seq.frames.astype(np.float64).reshape(shapes[name])

    augmented = "fusion.mod_gain_osm" in shapes
    fusion = FusionParams(
        layer_gain=tensor("fusion.layer_gain"),
        layer_bias=tensor("fusion.layer_bias"),
        attn_w=tensor("fusion.attn_w"),
        attn_b=tensor("fusion.attn_b"),
        temperature_raw=tensor("fusion.temperature_raw"),
        mod_gain_fused=tensor("fusion.mod_gain_fused") if augmented else None,
        mod_bias_fused=tensor("fusion.mod_bias_fused") if augmented else None,
        mod_gain_osm=tensor("fusion.mod_gain_osm") if augmented else None,
        mod_bias_osm=tensor("fusion.mod_bias_osm") if augmented else None,
        gamma_fused=tensor("fusion.gamma_fused") if augmented else None,
        gamma_osm=tensor("fusion.gamma_osm") if augmented else None,
    )
    head = HeadParams(
        pool_v=tensor("head.pool_v"),
        pool_b=tensor("head.pool_b"),
        w1=tensor("head.w1"),
        b1=tensor("head.b1"),
        w2=tensor("head.w2"),
        b2=tensor("head.b2"),
        class_weights=tensor("head.class_weights"),
    )
    return ModelParams(fusion, head), meta
