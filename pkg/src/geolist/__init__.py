"""Learned spatio-textual relevance and a learned cluster index for top-k spatial keyword search."""
from .core import (Bounds, Dataset, DatasetError, GeoObject, GeoPoint, GeoTable, GroundTruthSet,
                   SpatialQuery, compute_bounds_and_distmax, s_dist)
from .data import SynthConfig, generate, read_dataset, write_dataset
from .eval import evaluate, ndcg_at_k, recall_at_k
from .index import (ClusterClassifier, ClusterIndex, IndexTrainConfig, PseudoLabelConfig,
                    evaluate_clusters, partition_dataset, train_index)
from .relevance import RelevanceModel, TrainConfig, train_relevance
from .search import brute_force_search, ivf_build, list_search

__version__ = "0.1.0"
