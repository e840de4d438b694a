"""Knowledge-graph reliability workbench.

Detect erroneous triples (contrastive multi-view and attribute-aware
confidence models), complete evolving graphs inductively over a
relation network, and mine KG evidence into prompts with a policy
miner and a contextual bandit, plus the evaluation harness for all of
it.
"""

__version__ = "0.1.0"

from . import aeke, autodiff, caged, evalkit, kgstore, noran, promptforge, synth, views

__all__ = ["aeke", "autodiff", "caged", "evalkit", "kgstore", "noran",
           "promptforge", "synth", "views", "__version__"]
