"""
Test suite for stabopt.

Fast unit tests run by default; full optimizations and convergence sweeps
carry the ``slow`` marker and can be skipped with ``-m "not slow"``.
"""
