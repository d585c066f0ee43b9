"""Explicit vision-text alignment loss on a toy multimodal transformer.

Subpackages
-----------
tensor      reverse-mode autodiff on float64 arrays
model       prefix-image decoder-only transformer and its checkpoint format
losses      cross-entropy, position-weighted alignment terms, composite loss
infotheory  exact entropy / mutual-information oracle on enumerable sequence models
training    synthetic captioning task, momentum SGD, training loop
cli         ``vistalign`` command line
"""

__version__ = "0.1.0"
