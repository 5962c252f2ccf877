"""Facial makeup removal pipeline.

Given a makeup photo, a residual U-net generator produces a de-makeup image
while a jointly trained attention module locates the cosmetics. Training uses
landmark-warped non-makeup references for pixel-aligned supervision plus
adversarial, identity, and per-region texture losses; evaluation scores
identity verification on the generated images.
"""

__version__ = "0.1.0"
