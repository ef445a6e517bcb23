"""Desk-scale student-oriented knowledge distillation lab.

A frozen teacher's intermediate features are refined for a student by a
differentiable feature-augmentation policy search, and distillation is
restricted to detected areas of mutual teacher/student importance; both
are trained by an alternating bi-level loop. Everything runs on CPU from
a deterministic seed.
"""

__version__ = "0.1.0"
