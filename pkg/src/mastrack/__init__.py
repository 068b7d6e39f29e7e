"""Observer-based leader-follower tracking under switching topologies and intermittent communication."""

__version__ = "0.1.0"
