"""Exception types shared across the package."""


class OutOfBoundsError(ValueError):
    """Query point lies outside the grid bounds beyond the clamp tolerance."""


class UnknownPhraseError(KeyError):
    """Query text is not in the vocabulary; carries the vocabulary for messages."""

    def __init__(self, phrase, vocabulary):
        self.phrase = phrase
        self.vocabulary = list(vocabulary)
        super().__init__(phrase)

    def __str__(self):
        return f"unknown phrase {self.phrase!r}; vocabulary: {', '.join(self.vocabulary)}"


class SchemaVersionError(ValueError):
    """Serialized artifact was written with an incompatible schema version."""


class ChecksumError(ValueError):
    """Stored checksum does not match file contents (corrupt or truncated)."""


class DatasetError(ValueError):
    """Dataset is structurally invalid (missing files, no annotated pixels, ...)."""


class QueryParseError(ValueError):
    """Relationship query text does not match the subject-predicate-object template."""


class TrainingDivergedError(RuntimeError):
    """A loss term became non-finite; message reports the step and all terms."""
