"""Model-extraction benchmark: metered oracles, query strategies, piracy training, metrics."""

from .oracle import Budget, Oracle, QueryRecord, ResponsePolicy, apply_policy, victim_predict
from .retro import impute_full_simplex, snapshot_diff

__version__ = "0.1.0"
