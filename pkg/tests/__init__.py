"""Tests for robustgen package."""
