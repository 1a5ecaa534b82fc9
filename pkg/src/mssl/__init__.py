"""Semi-supervised segmentation training with online pseudo labeling and
momentum (EMA) networks."""

__version__ = "0.1.0"
