"""Module-wise adaptive adversarial training for a toy modular driving stack."""
