"""Anomaly detection and categorization for layered-volume scans.

The heavy lifting lives in the compiled extension; this package simply
re-exports it.
"""

from octa._core import *  # noqa: F401,F403
from octa._core import __version__  # noqa: F401
