"""Utility modules for para: worker pool and profiling."""
