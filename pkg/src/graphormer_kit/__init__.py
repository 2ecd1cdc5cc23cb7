"""Graph transformer toolkit: structural encodings, biased attention, and
aggregator-emulation checks, built on a small numpy reverse-mode tape."""

__version__ = "0.1.0"
