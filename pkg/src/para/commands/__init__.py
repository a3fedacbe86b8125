"""Command implementation modules for para."""
