"""Tests for bottlecheck."""
