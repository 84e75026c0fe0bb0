"""Low-resource extractive question answering: a small numpy transformer,
SQuAD-style data tooling, translation alignment, PBT tuning and cost tracking."""

__version__ = "0.1.0"
