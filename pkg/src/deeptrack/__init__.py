"""Recurrent convolutional occupancy tracking from raw, partially observed grids.

Modules: ``sim`` (object world), ``sensor`` (ray-cast observations), ``nn``
(conv primitives and checkpoints), ``model`` (the tracker), ``train``
(BPTT with SGD or RMSProp), ``evaluate`` (metrics and frames), ``dataio`` (file formats),
``generate`` (dataset synthesis) and ``cli``.
"""

__version__ = "0.1.0"
