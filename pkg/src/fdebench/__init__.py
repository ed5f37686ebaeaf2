"""Target-centric monocular depth benchmark toolkit.

Builds image-target-depth triplet manifests, scores predictions over
foreground / boundary / global regions, and ships numeric reference kernels
for the gated multi-scale fusion block and the region-aware training loss.
"""

__version__ = "0.1.0"
