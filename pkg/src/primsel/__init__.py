"""primsel: profile convolution primitives, train execution-time models, and
pick the fastest primitive per layer of a CNN with a PBQP-style solver."""

__version__ = "0.1.0"
