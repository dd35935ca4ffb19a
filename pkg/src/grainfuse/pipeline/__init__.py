"""End-to-end pipeline: configs, datasets, artifacts, and the CLI.

Submodules:

- ``config``: defaults, YAML loading, dotted overrides
- ``tensorio``: the named-tensor container every artifact uses
- ``dataset``: dataset build/load and canonical evaluation slices
- ``experiments``: cached training, reconstruction, and scoring
- ``images``: PNG export with a netpbm fallback
- ``cli``: the ``grainfuse`` command
"""

from . import config, dataset, experiments, images, tensorio

__all__ = ["config", "dataset", "experiments", "images", "tensorio"]
