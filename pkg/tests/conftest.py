import pytest
import torch

from exgen.corpus import CorpusConfig, load_dataset, load_prompts, synthesize_toy_corpus
from exgen.model import ModelConfig, TinyLM
from exgen.vocab import build_vocab

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small deterministic corpus shared by unit tests."""
    out = tmp_path_factory.mktemp("corpus")
    config = CorpusConfig(num_sft=60, num_pref=30, num_prompts=20,
                          toxic_marker_rate=0.5)
    paths = synthesize_toy_corpus(config, 123, out)
    return {
        "config": config,
        "paths": paths,
        "triplets": load_dataset("sft", paths["sft"]),
        "pairs": load_dataset("preference", paths["preference"]),
        "prompts": load_prompts(paths["ppo_prompts"]),
    }


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    triplets = tiny_corpus["triplets"]
    texts = [t.prompt() for t in triplets] + [t.reference for t in triplets]
    return build_vocab(texts)


@pytest.fixture(scope="session")
def tiny_model(tiny_vocab):
    config = ModelConfig(vocab_size=len(tiny_vocab), context_length=192,
                         embed_dim=32, num_layers=2, num_heads=2,
                         adapter_rank=4, adapter_scale=2.0)
    return TinyLM(config, tiny_vocab, seed=0)
