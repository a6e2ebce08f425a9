"""Adaptive latent-space reasoning with depth and step shortcuts.

A desk-scale stack: numpy autodiff engine, decoder-only transformer,
router-adapter shortcut modules, two-stage distillation, dynamic latent
inference, and a benchmarking harness over synthetic multi-step
modular-arithmetic tasks.
"""

__version__ = "0.1.0"
