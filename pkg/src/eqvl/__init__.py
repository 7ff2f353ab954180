"""Equilibrium-regularized GAN surrogates for 2-D elastic stress fields."""
from __future__ import annotations

__version__ = "0.1.0"
