"""Shipped data files: category lists, prompt templates, stopwords."""

from __future__ import annotations

from importlib import resources


def data_path(name: str):
    """Filesystem path of a shipped data file (e.g. ``voc20.txt``)."""
    ref = resources.files(__package__).joinpath(name)
    if not ref.is_file():
        raise FileNotFoundError(f"no shipped data file named {name!r}")
    return ref
