"""Robustness finetuning toolkit: corruption-consistency losses (FMA, ST),
conventional augmentation training (AT), individual/combined augmentation
scheduling, corruption-strength calibration, and a desk-scale CNN training
harness with a reproducible experiment CLI.
"""

__version__ = "0.1.0"
