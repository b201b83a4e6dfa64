"""
stabopt: Optimal Stability Polynomials for Many-Stage Runge-Kutta Methods

Optimizes stability polynomials over their pseudo-extrema for a given
eigenvalue spectrum and realizes them as low-storage Shu-Osher schemes.
"""

__version__ = "0.1.0"
