"""stationlab: synthetic-anatomy station parsing experiments.

Organ segmentation in two contrast-stratified stages, station parsing with
organ-context input channels, differentiable key-organ selection, and the
metrics and phantom machinery needed to verify all of it end to end.
"""

__version__ = "0.1.0"
