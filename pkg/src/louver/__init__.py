"""Louver: exact threshold retrieval over attention keys."""
