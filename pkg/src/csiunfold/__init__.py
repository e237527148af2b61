"""Spherically normalized, trainable-measurement deep-unfolding CSI feedback.

Modules: ``numerics`` (small autodiff engine), ``transform``, ``channel``,
``augment``, ``codec``, ``training``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
