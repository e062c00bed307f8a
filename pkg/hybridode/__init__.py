"""
HybridODE: hybrid mechanistic/data-driven modeling of controlled dynamical systems.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"
