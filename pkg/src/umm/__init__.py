"""umm: checkpoint merging and distribution-fusion toolkit.

Subpackages are imported on demand; the top level exposes only the
version string and the error hierarchy.
"""

from umm import errors

__version__ = "0.1.0"

__all__ = ["errors", "__version__"]
