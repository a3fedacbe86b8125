"""Tests for adapter loading, saving and generation."""
