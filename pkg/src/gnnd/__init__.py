"""Graph network training toolkit: denoising-node regularization, message
passing architectures, oversmoothing diagnostics, and a deterministic
experiment harness."""

__version__ = "0.1.0"

from . import (config, errors, featurize, graphs, metrics, models, noise,
               synth, tensor, training)

__all__ = ["config", "errors", "featurize", "graphs", "metrics", "models",
           "noise", "synth", "tensor", "training", "__version__"]
