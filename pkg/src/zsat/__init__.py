"""Zero-shot audio tagging: log-mel features, embedding backbones, and a
cross-modal projection into a word-vector space."""

__version__ = "0.1.0"
