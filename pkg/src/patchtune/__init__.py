"""Fine-tuning with rare-patch contrastive and front-door losses on a planted benchmark."""

__version__ = "0.1.0"
