import pytest
import torch

from fsner.backbone import BackboneConfig, TinyTransformer
from fsner.corpus import SyntheticSpec, TypeCatalog, generate_synthetic_corpus
from fsner.prompting import Template
from fsner.tokenizer import Tokenizer


@pytest.fixture(scope="session")
def synth_spec():
    return SyntheticSpec(n_classes=3, n_sentences=60, entity_vocab_size=6, filler_vocab_size=12)


@pytest.fixture(scope="session")
def synth_corpus(synth_spec):
    return generate_synthetic_corpus(synth_spec, seed=3)


@pytest.fixture(scope="session")
def synth_catalog(synth_spec) -> TypeCatalog:
    return synth_spec.catalog()


@pytest.fixture(scope="session")
def templates():
    return Template.builtin("span_compact"), Template.builtin("type_compact")


@pytest.fixture(scope="session")
def tokenizer(synth_corpus, synth_catalog, templates) -> Tokenizer:
    texts = [t.text for t in templates] + list(synth_catalog.names) + [" ; ", " | "]
    return Tokenizer.build(texts, [w for s in synth_corpus for w in s.tokens])


def tiny_model(vocab_size, n_layers=2, hidden=16, heads=2, seed=0, dtype=torch.float32):
    m = TinyTransformer(BackboneConfig(vocab_size, n_layers, hidden, heads, 128), seed=seed)
    return m.to(dtype).freeze().eval()


@pytest.fixture
def model(tokenizer):
    return tiny_model(len(tokenizer))


ACCEPTANCE: list[str] = []


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
