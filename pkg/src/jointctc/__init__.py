"""Joint CTC/attention sequence transduction on numpy.

A small hierarchical encoder with CTC heads on the source and target sides,
an attention decoder, and two joint beam searches (output- and
input-synchronous) that combine both branches.
"""

from .ctc import PosteriorGrid, collapse, ctc_logprob, greedy_decode, viterbi_align
from .data import Example, SyntheticTaskSpec, gen_corpus, read_corpus, write_corpus
from .decoding import DecodeConfig, DecodeResult, Hypothesis, decode, decode_corpus
from .metrics import EvalReport, corpus_bleu, length_ratio, monotonicity, search_error_rate
from .model import ModelConfig, encode, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, lr_schedule, multitask_loss, train

__all__ = [
    "PosteriorGrid", "collapse", "ctc_logprob", "greedy_decode", "viterbi_align",
    "Example", "SyntheticTaskSpec", "gen_corpus", "read_corpus", "write_corpus",
    "DecodeConfig", "DecodeResult", "Hypothesis", "decode", "decode_corpus",
    "EvalReport", "corpus_bleu", "length_ratio", "monotonicity", "search_error_rate",
    "ModelConfig", "encode", "init_params", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "lr_schedule", "multitask_loss", "train",
]
