"""Texture-synthesizing neural cellular automata.

A 12-channel CA whose per-cell update is a tiny two-layer network over
Sobel/Laplacian perception features, trained so that snapshots of the
evolving grid match the Gram statistics of a template image.
"""

__version__ = "0.1.0"
