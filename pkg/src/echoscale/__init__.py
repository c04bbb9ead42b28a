"""Audio-visual metric depth and echo-informed scale correction."""

__version__ = "0.1.0"
