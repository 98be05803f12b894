"""Schema-driven kernel event trace processing.

Raw binary event frames are decoded by offset against an event structure
table, semantically corrected through relational mapping tables, and exported
as enriched JSON lines, behavior triples and provenance graphs.
"""

__version__ = "0.1.0"
