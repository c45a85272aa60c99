"""Weakly-supervised segmentation with gradient-gated feedback units.

A small convolutional network is trained from image-level binary labels.
At inference, neurons whose gradient toward the target class score is not
positive are switched off and the network is run a second time; the
target channel of the last convolution is the dense localization map.
"""

__version__ = "0.1.0"
