"""Desk-scale MaskCLIP: vision-language contrastive pretraining with masked self-distillation."""

__version__ = "0.1.0"
