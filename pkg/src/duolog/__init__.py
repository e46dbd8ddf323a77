"""Two-model role-alternating dialog language modeling, desk scale."""

from .manifest import TOOL_VERSION as __version__
from .corpus import (Dialog, Role, Utterance, parse_unified, read_corpus,
                     serialize_unified, write_corpus)
from .synth import SyntheticGrammar, generate_synthetic
from .bpe import (TokenizedDialog, Vocab, decode, encode, encode_dialog,
                  read_vocab, train_bpe, write_vocab)
from .model import (ModelConfig, PositionSampler, RoleAlternatingModel,
                    TransformerLM, dialog_logits, lm_init, sample_offset)
from .training import (LossBreakdown, TeacherHandle, TeacherPair, TrainConfig,
                       alpha_at, discount_weights, distill_loss, lm_loss,
                       load_model, load_teacher, make_teacher, save_model,
                       total_loss, train)
from .generate import ChatSession, DecodeConfig, chat_step, generate_utterance
from .metrics import MetricsReport, bleu, evaluate, perplexity, success_f1
from .manifest import RunManifest, verify_manifest

__all__ = [
    "__version__",
    "Dialog", "Role", "Utterance", "parse_unified", "serialize_unified",
    "read_corpus", "write_corpus",
    "SyntheticGrammar", "generate_synthetic",
    "TokenizedDialog", "Vocab", "decode", "encode", "encode_dialog",
    "read_vocab", "train_bpe", "write_vocab",
    "ModelConfig", "PositionSampler", "RoleAlternatingModel", "TransformerLM",
    "dialog_logits", "lm_init", "sample_offset",
    "LossBreakdown", "TeacherHandle", "TeacherPair", "TrainConfig",
    "alpha_at", "discount_weights", "distill_loss", "lm_loss", "load_model",
    "load_teacher", "make_teacher", "save_model", "total_loss", "train",
    "ChatSession", "DecodeConfig", "chat_step", "generate_utterance",
    "MetricsReport", "bleu", "evaluate", "perplexity", "success_f1",
    "RunManifest", "verify_manifest",
]
