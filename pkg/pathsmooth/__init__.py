"""
pathsmooth: particle smoothing for hidden Markov models.

Implementation lives here; the top-level `smoother.py` script is a thin
wrapper around `pathsmooth.cli` for `python smoother.py ...` invocations.
"""

__all__ = [
    "__version__",
]

__version__ = "0.1.0"
