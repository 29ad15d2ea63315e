"""Lattice-supervised unsupervised acoustic model adaptation at desk scale."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .lattice import (Lattice, forward_backward, best_path, prune,  # noqa: F401
                      utterance_confidence, read_lattice, write_lattice)
from .graphs import (PhoneSet, PhoneNgramLM, SearchGraph, estimate_phone_lm,  # noqa: F401
                     compile_denominator, compile_decoding_graph, numerator_from_transcript,
                     numerator_from_lattice, read_graph, write_graph)
from .model import (ALL, LHUC_ONLY, SI, AcousticModel, ModelConfig, ParamSelector,  # noqa: F401
                    LrSchedule, init_model, forward, backward, sgd_step, save_model, load_model)
from .lfmmi import mmi_loss_and_grad, train, align  # noqa: F401
from .corpus import GeneratorConfig, Corpus, Utterance, generate, read_corpus, write_corpus  # noqa: F401
from .decoder import DecodeConfig, decode_utterance, decode_corpus  # noqa: F401
from .harness import (AdaptationConfig, ExperimentReport, adapt_speaker,  # noqa: F401
                      filter_by_confidence, run_experiment, score)
