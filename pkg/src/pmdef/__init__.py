"""Prediction-matching autoencoder defence: detect, correct and score
adversarial and drifted inputs, with bundled attack generators and an
evaluation suite."""

__version__ = "0.1.0"
