"""Desk-scale fog/edge orchestration stack.

Brokers (masters) ingest oximeter traces from gateways, anchor them in a
per-master proof-of-work ledger, and dispatch analysis tasks to fog workers
or a simulated cloud backend. Workers combine an executor with encrypted
storage, a credential archive, and ledger replicas. A bench harness runs the
full experiment matrix and checks the expected performance orderings.
"""

__version__ = "0.1.0"
