"""Desk-scale machine unlearning for code language models.

Modules: ``autodiff`` (tape autodiff + AdamW), ``lm`` (fixed-context MLP LM),
``surgery`` (target distributions for PROD), ``trainers`` (memorisation and
the five unlearning objectives), ``metrics``, ``data`` (synthetic tasks),
``experiment`` and ``cli`` (the disk-backed pipeline).
"""

__version__ = "0.1.0"
