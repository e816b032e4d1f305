"""Multi-domain, multi-task segmentation with domain-specific normalization,
multi-scale contrastive regularization and anatomical priors."""

__version__ = "0.1.0"
