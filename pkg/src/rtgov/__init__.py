"""Runtime governance for agent actions.

Policy grammars compile to DFAs that mask token logits before sampling;
a vector-clock CRDT replicates signed policy mutations; an epoch cache
binds enforcement to an attested policy root and fails closed; every
decision lands in a hash-chained, OSCAL-exportable audit log.
"""

__version__ = "0.1.0"
