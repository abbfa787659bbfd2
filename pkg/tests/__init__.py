"""Tests for the Med-NCA engine and harness."""
