"""Preprocessing, losses, optimizer and training loop."""
