"""Roto-translation group convolutional networks on a small numpy autograd engine.

Modules: ``autograd`` (tensors and reverse-mode gradients), ``geometry``
(SE(2) elements and their actions on images), ``kernels`` (disk masks and the
sparse rotation operator), ``layers`` (lifting, group correlation, projection),
``network`` (the six-layer chain), ``training``, ``metrics``, ``harness``
(equivariance and gradient checks) and ``cli``.
"""

__version__ = "0.1.0"
