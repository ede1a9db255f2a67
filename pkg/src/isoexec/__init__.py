"""Callback-isolated executor framework and overhead benchmark."""
from .executors import (CallbackIsolatedExecutor, ExecutorKind, MultiThreadedExecutor, SingleThreadedExecutor,
                        make_executor)
from .model import (BusyWork, CallbackSpec, NodeSpec, Policy, SchedAttr, Subscription, Timer, build_graph,
                    validate_isolation_constraints, validate_sched_attr)
from .transport import Domain

__version__ = "0.1.0"
