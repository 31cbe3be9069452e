"""Traffic-as-language toolkit: captures to tokens to small transformers."""

__version__ = "0.1.0"
