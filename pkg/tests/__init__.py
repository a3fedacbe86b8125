"""Test suite for para."""
