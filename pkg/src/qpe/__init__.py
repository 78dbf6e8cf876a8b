"""Quantum probability estimation: certified entropy accumulation for Bell trials.

Subpackage map:

- ``quantum_core``: Hermitian/positive operator substrate, Renyi powers,
  classical-quantum block distributions, distance measures.
- ``models``: (k,2,2) Bell-trial configurations, POVMs, canonical states,
  reference trial distributions.
- ``qef_engine``: trial functions, the defining inequality, chaining,
  inner maximization over states and certified suprema over configurations.
- ``estimators``: entropy estimators, probability estimation factors built
  from them, spot-check and binary-model constructions.
- ``accounting``: smooth min-entropy accounting, trial-count planning and
  comparison curves against entropy accumulation.
- ``pef_opt``: classical probability estimation factor optimization over
  polytope models and certification over quantum realizations.
- ``protocols``: executable randomness generation protocols with seeded
  extraction.
"""

from __future__ import annotations

__version__ = "0.1.0"

__all__ = [
    "quantum_core",
    "models",
    "qef_engine",
    "estimators",
    "accounting",
    "pef_opt",
    "protocols",
]
