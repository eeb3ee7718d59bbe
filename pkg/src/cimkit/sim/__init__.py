"""Cycle-level simulator and the functional reference executor."""

from .engine import (
    AddressFault, CapacityFault, CoreState, DeadlockError, SimError, SimReport, Simulator, simulate,
)
from .noc import Message, NocState
from .reference import reference_execute
