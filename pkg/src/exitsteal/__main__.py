"""`python -m exitsteal` mirrors the installed console script."""

from .harness.cli import entrypoint

entrypoint()
