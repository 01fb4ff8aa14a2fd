"""Patient-pair contrastive pretraining of ECG encoders on synthetic multi-cohort data."""

__version__ = "0.1.0"
