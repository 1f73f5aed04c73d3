"""Multiscale audio spectrogram transformer."""
