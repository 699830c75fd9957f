"""Bundled skeleton topology files (``*.topo``)."""
