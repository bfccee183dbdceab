"""Open-set test-time adaptation for late-fusion multimodal classifiers.

Modules: ``diffcore`` (reverse-mode autodiff), ``model``, ``losses``,
``metrics``, ``optimizer`` (Adam), ``streams`` (synthetic data and
protocols), ``adapt`` (online loop), ``harness`` (configs, outputs, CLI)
and ``gradcheck``.
"""

__version__ = "0.1.0"
