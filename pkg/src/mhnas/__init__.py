"""Multi-hardware neural architecture search.

Layer graphs and MobileNet baselines (``layers``), the factorized search space
(``space``), linear latency models (``latency``, ``hardware``), normalized
multi-hardware metrics and rewards (``metrics``), search algorithms
(``search``) and Pareto/report helpers (``reporting``).
"""

__version__ = "0.1.0"
