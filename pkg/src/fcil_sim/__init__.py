"""Feature-space simulator for federated class-incremental learning with generative prototypes."""

__version__ = "0.1.0"
