"""
Small-value probability toolkit: Galton-Watson martingale limits and
Brownian local-time functionals
"""
