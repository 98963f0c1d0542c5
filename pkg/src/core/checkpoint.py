#!/usr/bin/env python3
"""
Layer checkpoints as NumPy ``.npz`` containers.

Every payload array is stored as raw float64, so save/load is bit-exact. The
container carries a format tag and the layer config as JSON; nothing is
pickled.
"""
import json
import logging
from pathlib import Path

import numpy as np

from core.errors import InvalidInput
from core.moe_layer import LayerConfig, SpectralMoeLayer
from core.routing import RouterState
from core.spectral_core import ExpertAdapter, SpectralSegment

logger = logging.getLogger(__name__)

FORMAT_VERSION = "spectral-moe-layer/1"


def save_layer(path, layer):
    path = Path(path)
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "config": np.array(json.dumps(layer.config.to_dict(), sort_keys=True)),
        "base": layer.base,
        "residual": layer.residual,
        "router": layer.router.w_z,
        "scales": layer.scales,
    }
    for i, expert in enumerate(layer.experts):
        arrays[f"expert_{i}_b"] = expert.b
        arrays[f"expert_{i}_a"] = expert.a
        segment = expert.segment
        if segment is not None:
            arrays[f"expert_{i}_start"] = np.array(segment.start)
            arrays[f"expert_{i}_u"] = segment.u_seg
            arrays[f"expert_{i}_s"] = segment.s_seg
            arrays[f"expert_{i}_v"] = segment.v_seg
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        np.savez(handle, **arrays)
    logger.info("saved layer checkpoint to %s", path)
    return path


def load_layer(path):
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        version = str(data["format_version"]) if "format_version" in data.files else None
        if version != FORMAT_VERSION:
            raise InvalidInput(f"{path}: unsupported checkpoint format {version!r}")
        config = LayerConfig.from_dict(json.loads(str(data["config"])))
        scales = data["scales"]
        experts = []
        for i in range(config.n_experts):
            segment = None
            if f"expert_{i}_start" in data.files:
                u_seg = data[f"expert_{i}_u"]
                segment = SpectralSegment(
                    start=int(data[f"expert_{i}_start"]),
                    width=u_seg.shape[1],
                    u_seg=u_seg,
                    s_seg=data[f"expert_{i}_s"],
                    v_seg=data[f"expert_{i}_v"],
                )
            experts.append(ExpertAdapter(
                b=data[f"expert_{i}_b"],
                a=data[f"expert_{i}_a"],
                scale=float(scales[i]),
                segment=segment,
            ))
        layer = SpectralMoeLayer(
            base=data["base"],
            residual=data["residual"],
            experts=experts,
            router=RouterState(data["router"]),
            config=config,
        )
    logger.info("loaded layer checkpoint from %s", path)
    return layer
