"""Streaming transducer with an attention-decoder predictor.

Subpackages by responsibility: ``autodiff`` (tensor engine), ``kernels``
(lattice forward-backward, compiled or numpy), ``losses``, ``model``,
``streaming`` (chunk-synchronized greedy decoding), ``metrics``, ``data``
(synthetic tasks), ``trainer`` and ``cli``.
"""

__version__ = "0.1.0"
