"""Knowledge tracing with a small decoder LM, slot injection, and plug-in context and sequence modules."""

__version__ = "0.1.0"
