"""Two-phase collaborative image categorization toolkit.

Phase 1 learns latent item vectors from user-item interaction logs;
phase 2 trains an image classifier whose auxiliary task is to
reconstruct those vectors, so that categorization of new images (with
no interaction history) improves over an image-only model.
"""

__version__ = "0.1.0"
