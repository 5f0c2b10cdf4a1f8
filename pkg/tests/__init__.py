"""Tests for marginmatch."""
