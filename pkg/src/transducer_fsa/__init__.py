"""Toy stateless-decoder transducer: losses, search and FSA lattice decoding."""
__version__ = "0.1.0"

from .fsa import Fsa, parse_fsa_text, serialize_fsa_text, trivial_graph, ngram_graph_from_arpa
from .loss import LogProbGrid, Variant, forward, grad
from .model import ModelConfig, TrainConfig, init_model, synth_dataset, train
from .search import SearchParams, beam_search, greedy_search, greedy_search_batch
from .fsa_search import FsaSearchParams, fsa_beam_search, lattice_to_best_seq

__all__ = [
    "Fsa", "parse_fsa_text", "serialize_fsa_text", "trivial_graph", "ngram_graph_from_arpa",
    "LogProbGrid", "Variant", "forward", "grad",
    "ModelConfig", "TrainConfig", "init_model", "synth_dataset", "train",
    "SearchParams", "beam_search", "greedy_search", "greedy_search_batch",
    "FsaSearchParams", "fsa_beam_search", "lattice_to_best_seq",
]
