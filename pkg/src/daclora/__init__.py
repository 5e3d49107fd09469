"""Dynamic adversarial curriculum for LoRA fine-tuning of a dual-encoder classifier."""

__version__ = "0.1.0"
