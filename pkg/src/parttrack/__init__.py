"""Online single-object tracker that learns a grammar of parts and
tracks by parsing."""

__version__ = "0.1.0"
