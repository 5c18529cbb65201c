"""Parameterized physics-informed networks for families of PDEs, built on numpy.

Modules: ``jetad`` (jets + reverse tape), ``nets`` (architectures, checkpoints),
``pdes`` (families and residuals), ``truth`` (reference solvers, datasets),
``train`` (losses, Adam, schedules, fine-tuning), ``modsvd`` (SVD modulation),
``metrics`` and ``lab``/``cli`` (experiment runner).
"""

__version__ = "0.1.0"
