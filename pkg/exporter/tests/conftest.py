"""Shared fixtures: a tiny randomly initialized BERT-style checkpoint with a
hand-written word-level vocabulary, saved to disk so loading paths are
exercised without any network access."""

import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizer

from sigexport.exporter import TextPair

WORDS = [
    "the", "a", "of", "capital", "city", "france", "paris", "berlin",
    "germany", "river", "seine", "spree", "is", "in", "on", "largest",
    "population", "museum", "tower", "bridge", "what", "where", "which",
    "country", "located", "answer", "famous", "old", "new", "north",
]


@pytest.fixture(scope="session")
def checkpoint_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny-bert")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + WORDS
    vocab_file = path / "vocab.txt"
    vocab_file.write_text("\n".join(vocab) + "\n")
    tokenizer = BertTokenizer(str(vocab_file))

    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=64,
        hidden_dropout_prob=0.1,
        attention_probs_dropout_prob=0.1,
    )
    model = BertModel(config)
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return path


@pytest.fixture(scope="session")
def model_and_tokenizer(checkpoint_dir):
    model = BertModel.from_pretrained(checkpoint_dir)
    tokenizer = BertTokenizer.from_pretrained(checkpoint_dir)
    return model, tokenizer


@pytest.fixture(scope="session")
def pairs():
    return [
        TextPair(0, 0, "capital of france", "paris is the capital of france"),
        TextPair(0, 1, "capital of france", "berlin is located on the spree river"),
        TextPair(1, 0, "largest city in germany", "berlin is the largest city in germany"),
        TextPair(1, 1, "largest city in germany", "the seine is a river in france"),
    ]
