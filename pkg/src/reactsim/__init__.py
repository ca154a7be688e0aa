"""Closed-loop traffic simulation on recorded logs.

Background agents replay their logs until a predicted conflict makes one of
them yield; it is then driven by a conflict-aware controller and handed back
to the log once the conflict is resolved.
"""

__version__ = "0.1.0"
