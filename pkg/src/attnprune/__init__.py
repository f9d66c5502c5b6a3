"""Channel pruning driven by attention statistics.

Attention gates are trained in front of every prunable layer of a frozen
network; the per-channel mean of their softmax outputs ranks channels, and a
single global compression ratio is turned into per-layer thresholds.
"""

__version__ = "0.1.0"
