"""Python interface to the flowdet core ops and run entry points."""

try:
    from flowdet._flowdet import *  # noqa: F401,F403  (installed layout)
except ImportError:  # pragma: no cover - build-tree layout
    from _flowdet import *  # noqa: F401,F403
