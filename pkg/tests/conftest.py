import pytest

from lorafl.data import SynthTask, poison, solid_trigger, synth_generate
from lorafl.model import ModelConfig, TrainableLayout, build
from lorafl.numkit import RngStream
from lorafl.training import sgd


class Toy:
    """A small MLP trained on a poisoned synthetic task."""

    def __init__(self):
        self.task = SynthTask(n_classes=3, image_shape=(8, 8, 3), pattern_seed=5)
        self.data = synth_generate(self.task, 60, RngStream(0, ("toy",)))
        self.trigger = solid_trigger(0, 0, 3, 3, (1.0, 0.0, 0.0), 2)
        self.config = ModelConfig(backbone="mlp", image_shape=(8, 8, 3), hidden=(16,), n_classes=3)
        self.params0 = build(self.config, RngStream(1))
        self.layout = TrainableLayout(self.params0)
        poisoned, _ = poison(self.data, self.trigger, 0.3, RngStream(2))
        vec, _ = sgd(self.layout, self.layout.pack(self.params0), self.params0, None, poisoned, 40, 0.1, 16,
                     RngStream(3))
        self.vec = vec
        self.params, _ = self.layout.unpack(vec, self.params0)


@pytest.fixture(scope="session")
def toy():
    return Toy()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
    if mod.SUITE_SECONDS:
        terminalreporter.write_line(mod.suite_time_line())
