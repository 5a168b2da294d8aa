import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("quick", deadline=None, max_examples=15)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- trained models shared by the slow tests -----------------------------------------

# 24 scenes of 240x240 give 24 patches, 192 after the 8-fold augmentation
TRAIN_SCENE = dict(height=240, width=240, crowns=4, overlap_pairs=1, distractors=3)
TRAIN_SCENES = 24
TRAIN_EPOCHS = 30


def scene(seed, **overrides):
    from mangotree import data
    return data.synth_scene(data.SceneSpec(seed=seed, **{**TRAIN_SCENE, **overrides}))


class TrainedModels:
    """Trains each (num_classes, seed) model once per session."""

    def __init__(self):
        self._patches = {}
        self._runs = {}

    def patches(self, num_classes):
        from mangotree import data
        if num_classes not in self._patches:
            pairs = [scene(1000 + i)[:2] for i in range(TRAIN_SCENES)]
            self._patches[num_classes] = data.build_patch_set(pairs, num_classes)
        return self._patches[num_classes]

    def get(self, num_classes, seed):
        """(model, loss trace, seconds spent training)."""
        import time
        from mangotree import network, training
        key = (num_classes, seed)
        if key not in self._runs:
            cfg = training.TrainConfig(epochs=TRAIN_EPOCHS, seed=seed, num_classes=num_classes)
            spec = network.build("mango_tree_net", num_classes)
            model = network.init_params(spec, training.derive_seed(seed, "init"))
            patches = self.patches(num_classes)
            start = time.perf_counter()
            model, trace = training.train(model, patches, cfg)
            self._runs[key] = (model, trace, time.perf_counter() - start)
        return self._runs[key]


@pytest.fixture(scope="session")
def trained():
    return TrainedModels()


# -- one summary line per acceptance gate --------------------------------------------

GATE_LINES = []


@pytest.fixture
def gate():
    def report(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] gate {number} {title}: {detail}"
        GATE_LINES.append(line)
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gates")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
