"""Tests for ma-power."""
