"""Kinematic-to-visual control engine: articulated tool fields, two-tier
expert routing with kinematic-prior objectives, budgeted execution scheduling,
and mask-based faithfulness metrics."""

__version__ = "0.1.0"
