import numpy as np
import pytest

from crossemo.audio import AudioBuffer
from crossemo.corpus import CorpusManifest, UtteranceRecord
from crossemo.features import FbankConfig
from crossemo.nn.models import CnnBlstmAttConfig


def pytest_runtest_logreport(report):
    # one visible PASS/FAIL line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        status = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPTANCE] {name}: {status}")


def tone(freq: float, seconds: float, sr: int = 16000, amp: float = 0.5) -> AudioBuffer:
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sr)


def make_record(i: int, **overrides) -> UtteranceRecord:
    fields = {
        "id": f"u{i:04d}",
        "audio_path": f"/data/u{i:04d}.wav",
        "corpus": "synthetic",
        "speaker": f"s{i % 4:02d}",
        "style": "acted",
        "emotion": ["angry", "happy", "sad", "neutral"][i % 4],
    }
    fields.update(overrides)
    return UtteranceRecord(**fields)


def make_manifest(n: int, name: str = "synthetic", **overrides) -> CorpusManifest:
    return CorpusManifest(name=name, records=tuple(make_record(i, **overrides) for i in range(n)))


@pytest.fixture(scope="session")
def desk_fbank() -> FbankConfig:
    return FbankConfig(max_seconds=1.2)


@pytest.fixture(scope="session")
def desk_model_config() -> CnnBlstmAttConfig:
    return CnnBlstmAttConfig(
        conv_channels=(8, 16),
        pool_after=(1, 2),
        blstm_hidden=32,
        fc_sizes=(32, 16),
        attention_dim=16,
        n_classes=4,
    )


@pytest.fixture(scope="session")
def reference_corpus(tmp_path_factory, desk_fbank):
    """Session-scoped desk corpus: 2 speakers x 4 classes x 4 utterances."""
    from crossemo.features import FeatureStore
    from crossemo.synth import SynthCorpusSpec, generate_corpus

    root = tmp_path_factory.mktemp("refcorpus")
    spec = SynthCorpusSpec(
        name="ref", n_speakers=2, utterances_per_class_per_speaker=4, seed=42
    )
    manifest = generate_corpus(spec, root)
    store = FeatureStore(manifest, desk_fbank)
    return spec, manifest, store
