"""Dynamic task vector grouping for multi-task prompt transfer.

A deterministic engine that learns task prompt vectors on a toy testbed,
scores source-task subsets by target similarity and knowledge consistency,
selects groups greedily (with an exact enumeration oracle), merges rescaled
task vectors into a mixed prompt, and runs the dynamic regrouping transfer
loop with comparison baselines.
"""

__version__ = "0.1.0"

from .tpv import (  # noqa: F401
    ScalingTerm,
    SoftPrompt,
    TaskPromptVector,
    compute_tpv,
    cosine_prompt_sim,
    prompt_fingerprint,
    rescale,
    sim,
)
