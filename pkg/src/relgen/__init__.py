"""Conditional latent diffusion over relation phrases for visual relation detection."""
