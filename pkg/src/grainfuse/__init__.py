"""grainfuse: multimodal diffusion reconstruction of polycrystal slice images.

Subpackages are imported lazily so that numpy-only workflows do not pay the
torch import cost. ``from grainfuse import orientation`` works as usual.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "orientation",
    "synthgen",
    "diffusion",
    "solver",
    "tasks",
    "metrics",
    "pipeline",
    "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
