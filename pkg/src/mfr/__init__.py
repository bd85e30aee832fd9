"""Meta-optimized embedding training across domains on a from-scratch autodiff engine.

Submodules:

``tensor``      float64 primitives with finiteness checks
``autodiff``    reverse-mode tape with gradient-of-gradient support
``model``       MLP embedding network and checkpoint files
``losses``      hard-pair, soft-classification and domain-alignment losses
``sampling``    domain-level meta-batch construction
``trainer``     meta-train / meta-test optimization and the joint baseline
``synth``       synthetic multi-domain identity data and dataset files
``evaluation``  verification rate at FAR, Rank-1 and AUC
``verify``      finite-difference gradient suites
``cli``         ``mfr`` command
"""

__version__ = "0.1.0"
