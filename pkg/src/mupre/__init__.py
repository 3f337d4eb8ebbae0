"""Matrix-preconditioned optimizers, width/depth transfer rules, and a
verification harness built around closed-form oracles.

Submodules:
  linalg   dense kernels (eigendecomposition, orthogonalization, power iteration)
  optim    optimizer update rules, grafting, blocking, normalization
  scaling  per-layer learning-rate / epsilon / init / weight-decay multipliers
  models   scalar-input MLP and residual-MLP testbeds with analytic gradients
  harness  coordinate checks, sweeps, rank scans, oracles, compute multipliers
  cli      command-line entry points
"""

__version__ = "0.1.0"
