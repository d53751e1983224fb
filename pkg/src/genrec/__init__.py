"""Generative sequential recommender over dual-source hierarchical item indices.

Pipeline: corpus ingestion and leave-one-out splits -> semantic/behavioral
item embeddings -> hierarchical k-means index tokens -> decoder-only
backbone trained in two stages (mixed-task initial training with a
contrastive decompression head, then adapter-only annealing) ->
trie-constrained beam-search recommendation and Recall/NDCG evaluation.
"""

from .backbone import AdamW, DecoderBackbone, ModelConfig, Vocab, extend_vocab
from .corpus import (
    InteractionLog,
    Splits,
    five_core_filter,
    leave_one_out_split,
    load_corpus,
    truncate_history,
)
from .decode import constrained_beam_search, recommend
from .embed import (
    BehaviorConfig,
    EmbeddingMatrix,
    SemanticEmbedder,
    semantic_embed,
    train_behavior_encoder,
)
from .indexer import (
    IndexConfig,
    IndexTrie,
    ItemIndex,
    assemble_unified_index,
    build_trie,
    capacity,
    hierarchical_kmeans,
    vocab_tokens,
)
from .metrics import MetricsReport, evaluate, ndcg_at_k, recall_at_k
from .training import (
    LossBreakdown,
    TaskData,
    TrainConfig,
    annealing_tune,
    contrastive_loss,
    generation_loss,
    initial_train,
    total_loss,
)

__version__ = "0.1.0"
