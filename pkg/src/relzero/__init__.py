"""Relational zero-watermarking.

An image's watermark is a set of K patch pairs whose feature distances survive
editing; nothing is embedded in the pixels. Records are Arnold-scrambled and
stored externally; verification tests pair-set overlap against a threshold
calibrated for a target false-positive rate.
"""

from .imaging import (
    ImageBuffer,
    PatchFeatureMap,
    extract_mean_rgb,
    load_embeddings,
    load_image,
    save_embeddings,
    save_image,
)
from .perturb import AttackConfig, apply_attack, attack_matrix, parse_attack_spec, surrogate_edit
from .predictor import (
    PredictorModel,
    TrainConfig,
    bce_loss,
    extract_watermark,
    init_model,
    load_checkpoint,
    predict_all,
    predict_pair,
    save_checkpoint,
    train,
)
from .relational import (
    DistanceMatrix,
    PairIndexSet,
    StabilityScores,
    make_ground_truth,
    pairwise_distances,
    stability_scores,
    top_k_pairs,
)
from .watermark import (
    ArnoldKey,
    CalibrationResult,
    DecryptError,
    VerifyResult,
    WatermarkRecord,
    arnold_forward,
    arnold_inverse,
    calibrate,
    decrypt,
    encrypt,
    overlap,
    pair_from_index,
    pair_index,
    registry_get,
    registry_put,
    verify,
)

__version__ = "0.1.0"

__all__ = [
    "ImageBuffer",
    "PatchFeatureMap",
    "load_image",
    "save_image",
    "extract_mean_rgb",
    "load_embeddings",
    "save_embeddings",
    "DistanceMatrix",
    "PairIndexSet",
    "StabilityScores",
    "pairwise_distances",
    "stability_scores",
    "top_k_pairs",
    "make_ground_truth",
    "AttackConfig",
    "apply_attack",
    "attack_matrix",
    "parse_attack_spec",
    "surrogate_edit",
    "PredictorModel",
    "TrainConfig",
    "init_model",
    "predict_pair",
    "predict_all",
    "bce_loss",
    "train",
    "extract_watermark",
    "save_checkpoint",
    "load_checkpoint",
    "ArnoldKey",
    "WatermarkRecord",
    "CalibrationResult",
    "VerifyResult",
    "DecryptError",
    "pair_index",
    "pair_from_index",
    "arnold_forward",
    "arnold_inverse",
    "encrypt",
    "decrypt",
    "overlap",
    "calibrate",
    "verify",
    "registry_put",
    "registry_get",
]
