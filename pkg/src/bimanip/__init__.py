"""Bimanual regrasp planning: placement connectivity, in-placement (TypeA) and
placement-changing (TypeB) planners, and reusable certificates."""

__version__ = "0.1.0"
