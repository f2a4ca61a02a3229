"""Latent-feature adversarial attacks on small residual networks."""

from ._core import *  # noqa: F401,F403
from ._core import __version__  # noqa: F401
