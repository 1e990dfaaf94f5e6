"""Calibrated propensity score weighting for two-stage clustered samples."""
