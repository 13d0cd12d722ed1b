"""Customer-side incident diagnosis for AI infrastructure.

Offline, historical incidents become a vector store, a three-level
root-cause taxonomy, and per-node verification scripts. Online, a session
walks three tiers: retrieval over past incidents, recursive taxonomy search
with an execute/reflect loop, and knowledge-base exploration with human
feedback, escalating with a full evidence ticket when everything fails.
"""

__version__ = "0.1.0"
