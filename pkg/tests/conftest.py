"""Ensures the tests directory is importable (for shared reference helpers)."""
