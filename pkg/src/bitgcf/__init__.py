"""1-bit quantized graph collaborative filtering.

Trains, stores, and serves binary user-item representations: layer-wise
quantized graph convolution with a straight-through estimator, bit-packed
embedding tables, and integer-arithmetic top-K inference.
"""

from bitgcf.bench import BenchReport, bench_inference
from bitgcf.evaluate import (MetricsReport, evaluate, int_aggregate, ndcg_at_k,
                             recall_at_k, score_all_items, topk)
from bitgcf.graph import (EdgeListError, EmptyGraphError, InteractionGraph,
                          SplitDataset, load_edges, propagate, split_train_test)
from bitgcf.landscape import LandscapeGrid, perturb_landscape, signed_grid
from bitgcf.model import (ForwardCache, ModelParams, VariantFlags, aggregate,
                          forward, predict_scores, quantize_layer,
                          rescale_factor, sign)
from bitgcf.store import (CompressionReport, QuantizedTable, TableCorruptionError,
                          build_table, compression_report, export, load_table,
                          pack_codes, save_table, unpack_codes)
from bitgcf.train import (AdamState, Batch, DivergenceError, Gradients,
                          SamplingError, TrainConfig, TrainHistory, adam_step,
                          annealing_schedule, backward, bpr_loss, rec_loss,
                          sample_batch, sample_negatives, ste_backward,
                          total_loss, train_loop)

__version__ = "0.1.0"
