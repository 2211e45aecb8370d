"""CNN-LSTM regressor, trainer and streaming decoder."""
from .model import DEFAULT_PARAM_COUNT, CnnLstmModel, HyperParams
from .stream import StreamDecoder, infer_stream
from .train import Adam, TrainConfig, Trainer, TrainReport, predict_pairs, split_trials, train

__all__ = ["Adam", "CnnLstmModel", "DEFAULT_PARAM_COUNT", "HyperParams", "StreamDecoder",
           "TrainConfig", "TrainReport", "Trainer", "infer_stream", "predict_pairs",
           "split_trials", "train"]
