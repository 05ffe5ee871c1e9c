"""Error types raised across the toolkit.

Every error carries an ``error_code`` so the CLI (and any caller) can report
the originating module without parsing messages.
"""

from typing import Optional


class ChgError(Exception):
    error_code = "chg_error"
    module = "app"

    def __init__(self, message: str, error_code: Optional[str] = None) -> None:
        super().__init__(message)
        self.message = message
        if error_code is not None:
            self.error_code = error_code

    def __str__(self) -> str:
        return self.message


class UsageError(ChgError):
    error_code = "usage"
    module = "cli"


# SMILES parsing


class SmilesError(ChgError):
    error_code = "smiles"
    module = "smiles_parser"


class UnbalancedParenthesis(SmilesError):
    error_code = "unbalanced_parenthesis"

    def __init__(self, position: int) -> None:
        super().__init__(f"unbalanced parenthesis at position {position}")
        self.position = position


class UnclosedRingBond(SmilesError):
    error_code = "unclosed_ring_bond"

    def __init__(self, number: int) -> None:
        super().__init__(f"ring bond {number} opened but never closed")
        self.number = number


class UnknownSymbol(SmilesError):
    error_code = "unknown_symbol"

    def __init__(self, position: int, symbol: str = "") -> None:
        super().__init__(f"unknown symbol {symbol!r} at position {position}")
        self.position = position
        self.symbol = symbol


class UnsupportedFeature(SmilesError):
    error_code = "unsupported_feature"

    def __init__(self, name: str, position: Optional[int] = None) -> None:
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"unsupported SMILES feature: {name}{where}")
        self.name = name
        self.position = position


# Perception


class PerceptionError(ChgError):
    error_code = "perception"
    module = "mol_perception"


class ValenceViolation(PerceptionError):
    error_code = "valence_violation"

    def __init__(self, atom_index: int, detail: str = "") -> None:
        msg = f"valence violation on atom {atom_index}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.atom_index = atom_index


# Vocabulary


class VocabError(ChgError):
    error_code = "vocab"
    module = "psm_vocab"


class EmptyCorpus(VocabError):
    error_code = "empty_corpus"

    def __init__(self) -> None:
        super().__init__("cannot mine a vocabulary from an empty corpus")


class UnknownElement(VocabError):
    error_code = "unknown_element"

    def __init__(self, symbol: str) -> None:
        super().__init__(f"atom key {symbol!r} is not in the vocabulary")
        self.symbol = symbol


class VocabFormatError(VocabError):
    error_code = "vocab_format"


# Self-supervised targets


class TargetError(ChgError):
    error_code = "target"
    module = "target_labels"


class PatternError(TargetError):
    error_code = "pattern"


class InvalidFingerprintSize(TargetError):
    error_code = "invalid_fingerprint_size"

    def __init__(self, size: int) -> None:
        super().__init__(f"fingerprint size {size} must be a power of two in [64, 4096]")
        self.size = size


# Graph construction


class GraphError(ChgError):
    error_code = "graph"
    module = "chg_builder"


class PartitionMismatch(GraphError):
    error_code = "partition_mismatch"


# Tensors


class TensorError(ChgError):
    error_code = "tensor"
    module = "tensor_autodiff"


class ShapeMismatch(TensorError):
    error_code = "shape_mismatch"


class InvalidSegmentId(TensorError):
    error_code = "invalid_segment_id"


class NonScalarLoss(TensorError):
    error_code = "non_scalar_loss"


# Objectives


class ObjectiveError(ChgError):
    error_code = "objective"
    module = "objectives"


class DimensionMismatch(ObjectiveError):
    error_code = "dimension_mismatch"


class NoValidFragments(ObjectiveError):
    error_code = "no_valid_fragments"

    def __init__(self) -> None:
        super().__init__("mini-batch contains no valid fragments")


# Pipeline


class DatasetError(ChgError):
    error_code = "dataset"
    module = "pipeline"


class MissingSmilesColumn(DatasetError):
    error_code = "missing_smiles_column"


class EmptyDataset(DatasetError):
    error_code = "empty_dataset"


class TooSmall(DatasetError):
    error_code = "too_small"


class LabelArityMismatch(DatasetError):
    error_code = "label_arity_mismatch"


class CacheFormatError(DatasetError):
    error_code = "cache_format"


class MetricError(ChgError):
    error_code = "metric"
    module = "pipeline"


class SingleClass(MetricError):
    error_code = "single_class"


class EmptyInput(MetricError):
    error_code = "empty_input"


class DegenerateClustering(MetricError):
    error_code = "degenerate_clustering"


class CheckpointError(ChgError):
    error_code = "checkpoint"
    module = "tensor_autodiff"


class CheckpointFormatError(CheckpointError):
    error_code = "checkpoint_format"


class ConfigMismatch(CheckpointError):
    error_code = "config_mismatch"
