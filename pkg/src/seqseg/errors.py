"""Error types shared across the data pipeline and CLI.

Exit-code mapping in the CLI: usage errors exit 1, DataError 2, numeric
aborts (NonFiniteError) 3.
"""


class DataError(ValueError):
    """A dataset, checkpoint, or configuration input is invalid."""
