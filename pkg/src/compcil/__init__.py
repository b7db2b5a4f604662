"""Class-incremental learning with compressed exemplar buffers."""
from .buffer import (BudgetError, ExemplarBuffer, MemoryBudget, equivalent_capacity, herding_select,
                     rebuild_buffer)
from .codecs import (CodecError, CodecSpec, CompressedSample, RatePoint, dataset_bpp, decode, encode, psnr,
                     rd_curve)
from .selection import (CodecScore, ForgettingProbeResult, feature_mse, forgetting_probe, select_codec,
                        select_rate)
from .tasks import (ConfigurationError, DatasetHandle, ProtocolSpec, Split, TaskSequence, build_task_sequence,
                    make_synthetic, preprocess_with_codec, split_first_task)
from .trainer import ModelSnapshot, TrainConfig, evaluate, extract_features, train_step

__all__ = [
    "BudgetError", "CodecError", "CodecScore", "CodecSpec", "CompressedSample", "ConfigurationError",
    "DatasetHandle", "ExemplarBuffer", "ForgettingProbeResult", "MemoryBudget", "ModelSnapshot",
    "ProtocolSpec", "RatePoint", "Split", "TaskSequence", "TrainConfig", "build_task_sequence",
    "dataset_bpp", "decode", "encode", "equivalent_capacity", "evaluate", "extract_features",
    "feature_mse", "forgetting_probe", "herding_select", "make_synthetic", "preprocess_with_codec",
    "psnr", "rd_curve", "rebuild_buffer", "select_codec", "select_rate", "split_first_task", "train_step",
]
__version__ = "0.1.0"
