"""Semantic-ID generative recommendation with latent-token decoding.

Pipeline: synthesize a preference world, tokenize items into semantic IDs by
residual k-means, train a small deterministic scorer over the decoding trie,
decode with a constrained beam, and audit how the tree structure shapes the
learned probabilities (correlation strata, rank reversals, transitivity).
"""

__version__ = "0.1.0"

from . import _threads  # noqa: F401  (must precede numpy imports)
from .catalog import (  # noqa: F401
    Catalog,
    InteractionDataset,
    ItemFeatures,
    assign_sids,
    build_catalog,
    load_catalog,
    load_features,
    load_interactions,
    override_sids,
    resolve_collisions,
    rq_kmeans_fit,
    save_catalog,
)
from .trie import (  # noqa: F401
    DecodingTrie,
    TrieForest,
    all_position_permutations,
    build_forest,
    build_trie,
    depermute_sid,
    distance_census,
    path_edge_count,
    permute_sid,
    ultrametric_audit,
)
from .model import (  # noqa: F401
    ScorerConfig,
    ScorerParams,
    TrainExample,
    encode_user,
    flatten_history,
    init_params,
    item_log_prob,
    load_params,
    loss_and_gradients,
    masked_distribution,
    sample_latent,
    save_params,
    step_logits,
    train,
)
from .beam import (  # noqa: F401
    Hypothesis,
    RankedList,
    beam_search,
    depermute,
    full_rank,
)
from .analysis import (  # noqa: F401
    ProbMatrix,
    StudyReport,
    build_prob_matrix,
    cantelli_bound,
    correlation_study,
    dominant_latent_usage,
    effective_distance,
    kendall_structure_study,
    kendall_tau_b,
    latent_usage_distribution,
    latte_effective_correlation,
    pearson,
    rank_reversal_rate,
    reversal_bound_audit,
    sample_pairs_by_distance,
    transitivity_audit,
)
from .synth import (  # noqa: F401
    GroundTruth,
    World,
    WorldSpec,
    generate_world,
    make_benchmark_world,
    make_intransitive_world,
    make_modality_world,
    make_reversal_pair_world,
    tokenize_world,
)
from .evaluation import (  # noqa: F401
    MetricsReport,
    Split,
    build_examples,
    evaluate,
    leave_one_out,
    ndcg_at_k,
    recall_at_k,
)
