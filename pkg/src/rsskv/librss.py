"""Composition meta-library: fences at service boundaries, causal contexts.

Each store instance guarantees its own ordering; nothing orders reads
*across* two instances unless something forces it. The meta-library closes
that gap with one rule: before a client context starts a transaction at a
different service than its previous one, run the previous service's fence.
The fence callback is supplied by each service at registration and must
block until everything in the caller's causal past is visible to all future
readers of that service.

Contexts are owned by one session at a time. Processes that interact out of
band hand their context along with the message; the receiver merges it:
take the larger minimum-read floor, and adopt the sender's last-service name
only when the sender's context is causally newer (strictly larger floor).
On ties the receiver keeps its own — fences are conservative, so either
choice is safe.

The registry is per client context, not global: composition needs no
cross-client coordination, only that each context fences its own switches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .timebase import TS_ZERO, Timestamp


class RegistryError(ValueError):
    pass


@dataclass
class CausalContext:
    t_min: Timestamp = TS_ZERO
    last_service: str | None = None

    def encode(self) -> tuple:
        """Wire form carried inside application messages."""
        return (tuple(self.t_min), self.last_service)

    @staticmethod
    def decode(wire) -> "CausalContext":
        t_min, last = wire
        return CausalContext(Timestamp(*t_min), last)


def propagate_context(receiver: CausalContext, sender: CausalContext) -> CausalContext:
    """Merge a sender's context into the receiver's (returns the merge)."""
    merged = CausalContext(max(receiver.t_min, sender.t_min), receiver.last_service)
    if sender.t_min > receiver.t_min:
        merged.last_service = sender.last_service
    return merged


@dataclass
class ServiceRegistry:
    """Per-context registry of services and their fence callbacks."""

    fences: dict = field(default_factory=dict)  # name -> fence coroutine factory
    context: CausalContext = field(default_factory=CausalContext)

    def register_service(self, name: str, fence_fn):
        if name in self.fences:
            raise RegistryError(f"service {name!r} already registered")
        self.fences[name] = fence_fn

    def unregister_service(self, name: str):
        if name not in self.fences:
            raise RegistryError(f"service {name!r} not registered")
        del self.fences[name]
        if self.context.last_service == name:
            self.context.last_service = None

    def start_transaction(self, name: str):
        """Coroutine: fence the previous service if this one differs.

        Returns True iff a fence ran."""
        if name not in self.fences:
            raise RegistryError(f"service {name!r} not registered")
        prior = self.context.last_service
        fenced = False
        if prior is not None and prior != name and prior in self.fences:
            yield from self.fences[prior]()
            fenced = True
        self.context.last_service = name
        return fenced
