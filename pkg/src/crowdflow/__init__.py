"""Joint crowd density, localization and tracking toolkit at desk scale.

The package is a plain numpy/scipy library.  ``crowdflow.tensorcore`` is a
small reverse-mode autodiff engine; ``groundtruth``, ``stanet``,
``postprocess``, ``metrics`` and ``simulator`` build the full pipeline on
top of it, and ``cli`` exposes the file-based stages.
"""

__version__ = "0.1.0"

from . import tensorcore
