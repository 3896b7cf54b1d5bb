"""Few-shot talking-head synthesis with factorized spatial/style latents.

A two-step pipeline: a layout predictor turns driving landmarks plus a
512-d layout latent into a dense spatial map, and a SPADE generator renders
the frame from that map plus a 512-d style latent. Ships with a procedural
synthetic-face benchmark providing exact landmark/segmentation oracles.
"""

__version__ = "0.1.0"
