"""cgmlp: gMLP and Convolutional gated MLP image classifiers on a minimal
numpy tape-autodiff framework, with a training/comparison harness, conv-stem
feature-map visualization, and a CLI (`cgmlp --help`)."""

__version__ = "0.1.0"
