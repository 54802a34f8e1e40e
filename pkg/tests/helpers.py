"""Cheap stand-ins shared by the unit tests."""

import numpy as np

from genmark.synthesis import _data_digest, _stream_seed

# filled by the acceptance tests, printed by the terminal summary hook
ACCEPTANCE_LINES: list[str] = []


class StubSynth:
    """Emits the mean training image plus seeded noise, keyed like the real proxies."""

    def __init__(self, images, family="stub", noise=0.03):
        self.images = np.asarray(images, np.float32)
        self.family = family
        self.resolution = self.images.shape[1]
        self.channels = self.images.shape[-1]
        self.noise = noise
        self.synthesizer_id = f"{family}-{_data_digest(self.images)[:12]}"

    def synthesize(self, prompt_id, n, seed):
        out = []
        for j in range(n):
            rng = np.random.default_rng(_stream_seed(self.family, prompt_id, seed + j))
            base = self.images[rng.integers(len(self.images))]
            out.append(np.clip(base + rng.normal(0, self.noise, base.shape), 0, 1))
        return np.asarray(out, np.float32).reshape(n, self.resolution, self.resolution, self.channels)


def stub_trainer(family, images, steps=None, seed=0, config=None):
    return StubSynth(images, family)
