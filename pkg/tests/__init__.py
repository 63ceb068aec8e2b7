"""Tests for sslkit."""
