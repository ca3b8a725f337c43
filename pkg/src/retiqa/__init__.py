"""Retinal image quality assessment toolkit.

Submodules:
    imgproc   fundus preprocessing (FoV detection, crop/pad/resize, augmentation)
    priors    dark/bright channel priors, exact and fast, plus the fixed-Gaussian
              approximation used inside the network stem
    nnet      minimal CNN with explicit forward/backward, the prior-guided stem,
              initialisation and SGD
    data      synthetic fundus generation, manifests, k-fold splits, batching
    evaluate  confusion matrix, macro metrics, Grad-CAM heatmaps
    train     training loop, evaluation driver, checkpoint persistence
    cli       command-line entry point
"""

__version__ = "0.1.0"
