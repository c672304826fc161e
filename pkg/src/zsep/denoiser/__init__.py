"""Noise predictors: the exact Gaussian oracle and a small trainable MLP."""

from zsep.denoiser.analytic import AnalyticDenoiser, GaussianSourceModel, analytic_eps
from zsep.denoiser.base import CountingDenoiser, Denoiser, FunctionDenoiser
from zsep.denoiser.conditions import NULL, Composite, Condition, Label, Null, Random, parse_condition
from zsep.denoiser.tiny import (
    TinyDenoiser,
    TinyDenoiserParams,
    TrainResult,
    eval_loss,
    init_params,
    tiny_eps,
    tiny_forward,
    train,
)


def predict_eps(model: Denoiser, x_t, c, t):
    return model.predict_eps(x_t, c, t)


__all__ = [
    "AnalyticDenoiser", "Composite", "Condition", "CountingDenoiser", "Denoiser", "FunctionDenoiser",
    "GaussianSourceModel", "Label", "NULL", "Null", "Random", "TinyDenoiser", "TinyDenoiserParams",
    "TrainResult", "analytic_eps", "eval_loss", "init_params", "parse_condition", "predict_eps",
    "tiny_eps", "tiny_forward", "train",
]
