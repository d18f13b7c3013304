"""Schema-compiled relational mixture models fitted by variational message passing."""

__version__ = "0.1.0"
