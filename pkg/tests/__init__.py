"""
fokkerid Test Suite

This package contains unit, integration and acceptance tests for fokkerid.
Run tests with: python -m pytest tests/ -m "not slow"
"""
