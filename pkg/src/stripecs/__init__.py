"""Stripe-wise hyperspectral compressed sensing with a learned linear encoder."""

__version__ = "0.1.0"
