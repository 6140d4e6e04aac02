"""Causal time-variance-aware echo cancellation and speech enhancement in NumPy."""
from tvase.model import model_forward
from tvase.streaming import enhance, enhance_streaming, stream_create, stream_flush, stream_push
from tvase.weights import ModelConfig, ModelWeights, build, count_params, load_weights, save_weights

__version__ = "0.1.0"
