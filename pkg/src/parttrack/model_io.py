"""Versioned model files: grammar text, parameter arrays, detection
threshold and feature configuration in a single .npz container."""

from __future__ import annotations

import json

import numpy as np

from .features import FeatureConfig
from .grid_aog import aog_from_text, aog_to_text
from .parsing import Model, ModelParams

FORMAT_NAME = "parttrack-model"
FORMAT_VERSION = 1


def save_model(model: Model, path: str):
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tau": model.tau,
        "channels": model.channels,
        "part_level_offset": model.part_level_offset,
        "deform_radius": model.deform_radius,
        "cells_per_unit": model.cells_per_unit,
        "feature_config": {
            "cell_size": model.feature_config.cell_size,
            "interval": model.feature_config.interval,
            "hog": model.feature_config.hog,
            "lbp": model.feature_config.lbp,
            "color": model.feature_config.color,
        },
        "bias": {str(k): v for k, v in model.params.bias.items()},
    }
    arrays = {
        "manifest": np.array(json.dumps(manifest, sort_keys=True)),
        "aog": np.array(aog_to_text(model.aog)),
    }
    for tid, a in model.params.appearance.items():
        arrays["app_%d" % tid] = a
    for nid, d in model.params.deformation.items():
        arrays["def_%d" % nid] = d
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_model(path: str) -> Model:
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(str(z["manifest"]))
        if manifest.get("format") != FORMAT_NAME:
            raise ValueError("not a model file")
        if manifest.get("version") != FORMAT_VERSION:
            raise ValueError("unsupported model version %r" % manifest.get("version"))
        aog = aog_from_text(str(z["aog"]))
        appearance = {}
        deformation = {}
        for name in z.files:
            if name.startswith("app_"):
                appearance[int(name[4:])] = z[name]
            elif name.startswith("def_"):
                deformation[int(name[4:])] = z[name]
    params = ModelParams(appearance=appearance, deformation=deformation,
                         bias={int(k): float(v)
                               for k, v in manifest["bias"].items()})
    fc = manifest["feature_config"]
    model = Model(aog=aog, params=params, tau=float(manifest["tau"]),
                  feature_config=FeatureConfig(**fc),
                  channels=int(manifest["channels"]),
                  part_level_offset=int(manifest["part_level_offset"]),
                  deform_radius=int(manifest["deform_radius"]),
                  cells_per_unit=int(manifest["cells_per_unit"]))
    model.validate()
    return model
