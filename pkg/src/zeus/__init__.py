"""Zeus: an in-memory replicated transactional datastore engine.

Transactions execute on a single node after migrating object ownership
there; locally committed writes are replicated with an invalidation-based
reliable commit.  The package also ships a deterministic fault-injecting
simulator, invariant / strict-serializability checkers and desk-scale
benchmark workloads.
"""

__version__ = "0.1.0"
