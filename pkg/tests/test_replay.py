import unittest

import numpy as np

from errors import InsufficientSamplesError, StructuralError
from nnkit import Rng
from replay import ReplayBuffer, Transition, stack_batch


def _transition(tag: float) -> Transition:
    return Transition(np.array([tag, 0.0]), int(tag) % 2, tag, np.array([tag + 1.0, 0.0]), False)


class ReplayBufferTestCase(unittest.TestCase):
    def test_capacity_must_be_positive(self):
        with self.assertRaises(StructuralError):
            ReplayBuffer(0)

    def test_full_buffer_evicts_oldest_first(self):
        buffer = ReplayBuffer(3)
        for tag in range(5):
            buffer.push(_transition(float(tag)))
        self.assertEqual(len(buffer), 3)
        self.assertEqual([t.reward for t in buffer.ordered()], [2.0, 3.0, 4.0])

    def test_sample_before_warm_raises(self):
        buffer = ReplayBuffer(10)
        buffer.push(_transition(0.0))
        self.assertFalse(buffer.is_warm(2))
        with self.assertRaises(InsufficientSamplesError):
            buffer.sample(2, Rng(0))

    def test_sample_is_distinct_and_seeded(self):
        buffer = ReplayBuffer(50)
        for tag in range(50):
            buffer.push(_transition(float(tag)))
        first = [t.reward for t in buffer.sample(16, Rng(3))]
        second = [t.reward for t in buffer.sample(16, Rng(3))]
        self.assertEqual(first, second)
        self.assertEqual(len(set(first)), 16)

    def test_sampling_is_roughly_uniform(self):
        buffer = ReplayBuffer(10)
        for tag in range(10):
            buffer.push(_transition(float(tag)))
        rng = Rng(1)
        counts = np.zeros(10)
        for _ in range(2000):
            for t in buffer.sample(2, rng):
                counts[int(t.reward)] += 1
        self.assertLess(np.abs(counts / counts.sum() - 0.1).max(), 0.02)

    def test_stack_batch_shapes(self):
        batch = stack_batch([_transition(1.0), _transition(2.0)])
        self.assertEqual(len(batch), 2)
        self.assertEqual(batch.states.shape, (2, 2))
        self.assertEqual(batch.actions.dtype, np.int64)
        np.testing.assert_array_equal(batch.next_states[:, 0], [2.0, 3.0])
        self.assertFalse(batch.dones.any())


if __name__ == "__main__":
    unittest.main()
