"""Spatio-temporal Mamba video diffusion at desk scale."""
