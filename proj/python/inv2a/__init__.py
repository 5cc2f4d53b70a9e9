"""Prompt inversion toolkit, Python bindings over the C++ core."""

from ._inv2a import (
    CausalLM,
    DimensionError,
    EmptyInput,
    Error,
    FormatError,
    InvalidCorpus,
    ModelNotFound,
    SpecError,
    SplitError,
    StageError,
    Tokenizer,
    ValidationError,
    bleu,
    config_hash,
    evaluate,
    exact_match,
    ingest_dataset,
    knn_mutual_information,
    load_config,
    perturb_output,
    render_judge,
    render_rewrite,
    run_experiment,
    stage_order,
    token_f1,
    toy_prompts,
    write_toy_dataset,
)

__version__ = "0.1.0"
