"""Speech disentanglement with a Koopman-regularized two-branch autoencoder."""

__version__ = "0.1.0"
