"""Temporal localization of spliced synthetic speech segments.

Pipeline pieces: toy corpus generation with exact splice ground truth,
cepstral feature extraction, an anchor-free pyramid detector trained with
focal and DIoU losses on a small autodiff core, NMS decoding, and
mAP/EER/F1 evaluation. ``SpliceLocalizer`` and ``CepstralFeatures`` wrap
the pipeline in an estimator API; the ``spanloc`` CLI drives it end to end.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, grad_check, no_grad
from .config import (ExperimentConfig, config_to_dict, default_config,
                     load_config, parse_config)
from .corpus import (AnnotatedClip, CorpusConfig, SpanLabel, SpeechClip,
                     generate_corpus, load_corpus_clip, load_manifest)
from .errors import (CorruptFileError, InvalidConfigError, NumericError,
                     UnsupportedFormatError)
from .estimator import CepstralFeatures, SpliceLocalizer
from .features import FrameSpec, append_deltas, cepstral
from .metrics import EvalReport, average_map, eer, evaluate
from .model import ModelConfig, SpliceModel
from .postprocess import CandidateSpan, decode, nms
from .training import TrainConfig, train

__all__ = [
    "AnnotatedClip",
    "CandidateSpan",
    "CepstralFeatures",
    "CorpusConfig",
    "CorruptFileError",
    "EvalReport",
    "ExperimentConfig",
    "FrameSpec",
    "InvalidConfigError",
    "ModelConfig",
    "NumericError",
    "SpanLabel",
    "SpeechClip",
    "SpliceLocalizer",
    "SpliceModel",
    "Tensor",
    "TrainConfig",
    "UnsupportedFormatError",
    "append_deltas",
    "average_map",
    "cepstral",
    "config_to_dict",
    "decode",
    "default_config",
    "eer",
    "evaluate",
    "generate_corpus",
    "grad_check",
    "load_config",
    "load_corpus_clip",
    "load_manifest",
    "nms",
    "no_grad",
    "parse_config",
    "train",
    "__version__",
]
