"""Progressive conditional GAN for coloured point clouds.

Thin wrapper over the C++ core: JSON results are returned as Python objects.
"""

import json as _json

from . import _core
from ._core import (
    DataError,
    Error,
    Generator,
    NumericError,
    ShapeError,
    UsageError,
    chamfer,
    derive_seed,
    emd,
    fdd,
    jsd,
    load_clouds,
    load_generator,
    mmd_cov,
    normalize,
    precision_bits,
    read_ply,
    write_ply,
)

__all__ = [
    "DataError",
    "Error",
    "Generator",
    "NumericError",
    "ShapeError",
    "UsageError",
    "chamfer",
    "derive_seed",
    "emd",
    "evaluate",
    "fdd",
    "jsd",
    "load_clouds",
    "load_generator",
    "make_procedural_dataset",
    "mmd_cov",
    "normalize",
    "precision_bits",
    "read_ply",
    "train",
    "train_fdd_extractor",
    "write_ply",
]


def make_procedural_dataset(out, seed=0, samples_per_class=32, resolutions=(1024, 2048, 4096, 8192)):
    """Writes the two-class procedural dataset and returns its manifest."""
    return _json.loads(_core.make_procedural_dataset(str(out), seed, samples_per_class, list(resolutions)))


def train(config, seed=None, max_stages=None):
    """Trains from a JSON config file; returns the last checkpoint directory."""
    return _core.train(str(config), seed, max_stages)


def evaluate(dataset, fdd_checkpoint, gen_checkpoint=None, gen_dataset=None, seed=0, geometry_points=2048):
    """Per-class metric reports (list of dicts) for a generator or a generated dataset."""
    return _json.loads(
        _core.evaluate(
            str(dataset),
            None if gen_checkpoint is None else str(gen_checkpoint),
            None if gen_dataset is None else str(gen_dataset),
            str(fdd_checkpoint),
            seed,
            geometry_points,
        )
    )


def train_fdd_extractor(dataset, out, **config):
    """Trains the FDD feature classifier and saves it to `out`.

    Keyword arguments are extractor config keys (seed, resolution, epochs, ...).
    Returns a dict with per_class_accuracy, epochs_run and reached_target.
    """
    accuracy, epochs, reached = _core.train_fdd_extractor(str(dataset), str(out), _json.dumps(config))
    return {"per_class_accuracy": accuracy, "epochs_run": epochs, "reached_target": reached}
