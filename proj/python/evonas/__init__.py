"""Python interface to the evonas C++ core."""

import json as _json

from ._evonas import (
    ConfigError,
    OracleError,
    StageError,
    __version__,
    canonical_genome,
    compute_eer,
    evolve,
    match_count_fitness,
    mfcc,
    rank_sum_test,
    sample_genome,
    space_size,
    validate_genome,
)
from . import _evonas

STAGES = ("gen-data", "extract-features", "train-hypernet", "search", "retrain", "evaluate", "report")


def load_config(path, seed=None, out=None):
    """Parsed and validated experiment config as a dict."""
    return _json.loads(_evonas.load_config(str(path), seed, None if out is None else str(out)))


def run_stage(stage, config, seed=None, out=None, resume=False, genome=None):
    """Run one pipeline stage; returns its manifest record."""
    return _json.loads(
        _evonas.run_stage(stage, str(config), seed, None if out is None else str(out), resume, genome)
    )


def space_size_int(blocks, n_op=6):
    return int(space_size(blocks, n_op))
