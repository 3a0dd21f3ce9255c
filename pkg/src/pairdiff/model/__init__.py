"""Dual-stream denoiser, prompt encoding, latent codec and checkpoint format."""
