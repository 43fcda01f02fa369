"""Traffic flow forecasting with criss-crossed rectified attention, built on
a minimal numpy reverse-mode autodiff core."""

from .attention import (AttentionHeadParams, DelayConfig, delay_aware_keys,
                        encov, project_qkv, redasa_forward, relsa,
                        ressa_forward, retsa_forward, scaled_scores,
                        vanilla_attention)
from .autodiff import (Tensor, backward, conv2d, finite_diff_grad, matmul,
                       relu, rms_norm, softmax_rows)
from .data import SyntheticSpec, gen_synthetic, read_bundle, write_bundle
from .embedding import (EmbeddingParams, TemporalIndex, embed,
                        positional_encoding, temporal_indices)
from .errors import (ConfigError, ContractError, CrossflowError, DataError,
                     DimensionError, FormatError, NumericError)
from .graph import (AttentionMasks, LaplacianDecomposition, RoadNetwork,
                    build_adjacency, geo_mask, laplacian_embedding,
                    normalized_laplacian, sem_mask, symmetric_eigen)
from .model import (Checkpoint, ModelConfig, ModelParams, ModelStatics,
                    ParameterStore, build_params, criss_cross_streams,
                    encoder_layer_forward, load_checkpoint, model_forward,
                    output_head, restore_model, restsa_mix, save_checkpoint)
from .series import TrafficTensor
from .training import (AdamState, MetricReport, Normalizer, SplitSpec,
                       TrainConfig, Window, adam_step, evaluate,
                       last_value_baseline, make_windows, masked_mae_loss,
                       train_loop)

__version__ = "0.1.0"
