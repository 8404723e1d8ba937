"""Model-stealing attacks and the adaptive misinformation defense at desk scale."""

__version__ = "0.1.0"
