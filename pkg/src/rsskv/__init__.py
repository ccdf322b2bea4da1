"""Sharded, replicated, multi-versioned transactional KV over a simulated
wide-area network, with strict-serializable and relaxed (rss) read-only
transaction modes, a history consistency checker, and a workload harness."""

__version__ = "0.1.0"
