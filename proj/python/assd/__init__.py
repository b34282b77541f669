# Copyright 2026 The ASSD Authors
# SPDX-License-Identifier: Apache-2.0

"""Any-subset speculative decoding: orderings, exact tabular oracles,
speculative decoders, metrics, and the verification harness."""

from ._core import (
    MASK,
    AssdError,
    Ordering,
    TabularModel,
    Transformer,
    accept_probability,
    canonicalize_ordering,
    chi_square_gof,
    content_mask,
    decode,
    fully_correlated_table,
    generative_perplexity,
    product_table,
    query_mask,
    random_dirichlet_table,
    regularized_gamma_q,
    residual_distribution,
    run_command,
    shannon_entropy,
    step_exact_outcome_distribution,
    total_variation,
    verify,
)

__all__ = [
    "MASK",
    "AssdError",
    "Ordering",
    "TabularModel",
    "Transformer",
    "accept_probability",
    "canonicalize_ordering",
    "chi_square_gof",
    "content_mask",
    "decode",
    "fully_correlated_table",
    "generative_perplexity",
    "product_table",
    "query_mask",
    "random_dirichlet_table",
    "regularized_gamma_q",
    "residual_distribution",
    "run_command",
    "shannon_entropy",
    "step_exact_outcome_distribution",
    "total_variation",
    "verify",
]
