"""Context-augmented patch matching.

Small image patches are extended with a compact histogram describing how
often they recur in their surroundings (the con-patch), and the extended
vectors drive nearest-neighbour search for external denoising, a matching
benchmark and motion-compensated frame-rate up-conversion.
"""

__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402  ("cython" or "python")
