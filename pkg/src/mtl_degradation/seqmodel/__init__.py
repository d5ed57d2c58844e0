from .checkpoint import CheckpointError, deserialize, load, save, serialize
from .model import (BRANCHES, ForwardCache, MaskedSequence, ModelConfig, ModelError, PaddedInput,
                    Seq2SeqModel, TrajectoryPrediction, backward_batch, check_history, decode, encode,
                    forward_batch, init_model, mask_and_concat, mtl_model, pad_input, predict,
                    prepare_input, resample_history, stl_model, stl_predict)

MtlModel = Seq2SeqModel
StlModel = Seq2SeqModel

__all__ = [
    "CheckpointError", "deserialize", "load", "save", "serialize",
    "BRANCHES", "ForwardCache", "MaskedSequence", "ModelConfig", "ModelError", "PaddedInput", "Seq2SeqModel",
    "TrajectoryPrediction", "backward_batch", "check_history", "decode", "encode", "forward_batch", "init_model",
    "mask_and_concat", "mtl_model", "pad_input", "predict", "prepare_input", "resample_history", "stl_model",
    "stl_predict", "MtlModel", "StlModel",
]
