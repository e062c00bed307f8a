__app_name__ = "HybridODE"
__app_desc__ = "Hybrid mechanistic/data-driven modeling of controlled dynamical systems."
__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"
__version__ = "1.0.0"
__schema_version__ = "1.0"
