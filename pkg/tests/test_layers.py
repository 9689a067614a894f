import unittest

import numpy as np

import numerics as nx
from layers import EncoderStack, DecoderStack, Linear, causal_mask, padding_mask, sinusoidal_positions
from numerics import SeededRng, Tape, Tensor, no_grad


class TestLayers(unittest.TestCase):

    def test_masks(self):
        mask = causal_mask(3)[0, 0]
        self.assertEqual(mask[0, 1], -1e9)
        self.assertEqual(mask[1, 0], 0.0)
        pad = padding_mask(np.array([[False, True]]))
        self.assertEqual(pad.shape, (1, 1, 1, 2))
        self.assertEqual(pad[0, 0, 0, 1], -1e9)

    def test_sinusoidal_positions_first_row(self):
        table = sinusoidal_positions(4, 6)
        np.testing.assert_allclose(table[0, 0::2], 0.0)
        np.testing.assert_allclose(table[0, 1::2], 1.0)

    def test_encoder_ignores_padding(self):
        """PAD位置の値を変えても非PAD位置の出力は変わらない"""
        rng = SeededRng(0)
        encoder = EncoderStack(8, 2, 16, 1, rng).eval()
        x = SeededRng(1).normal((1, 3, 8)).astype(np.float32)
        pad = np.array([[False, False, True]])
        with no_grad():
            first = encoder(Tensor(x), padding_mask(pad)).data
            x[0, 2] += 5.0
            second = encoder(Tensor(x), padding_mask(pad)).data
        np.testing.assert_allclose(first[0, :2], second[0, :2], atol=1e-5)

    def test_decoder_is_causal(self):
        rng = SeededRng(2)
        decoder = DecoderStack(8, 2, 16, 1, rng).eval()
        memory = Tensor(SeededRng(3).normal((1, 2, 8)))
        x = SeededRng(4).normal((1, 3, 8)).astype(np.float32)
        with no_grad():
            first = decoder(Tensor(x), memory, causal_mask(3), None).data
            x[0, 2] -= 3.0
            second = decoder(Tensor(x), memory, causal_mask(3), None).data
        np.testing.assert_allclose(first[0, :2], second[0, :2], atol=1e-5)

    def test_state_dict_round_trip_and_strict_load(self):
        source = Linear(3, 2, SeededRng(5))
        target = Linear(3, 2, SeededRng(6))
        target.load_state_dict(source.state_dict())
        np.testing.assert_array_equal(source.weight.data, target.weight.data)
        with self.assertRaises(nx.ContractError):
            target.load_state_dict({"weight": source.weight.data})
        with self.assertRaises(nx.DimensionError):
            target.load_state_dict({"weight": np.zeros((2, 2)), "bias": np.zeros(2)})

    def test_linear_gradients_reach_parameters(self):
        layer = Linear(3, 2, SeededRng(7))
        with Tape() as tape:
            loss = nx.reduce_sum(layer(Tensor(np.ones((4, 3)))))
        tape.backward(loss, layer.parameters())
        np.testing.assert_allclose(layer.bias.grad, [4.0, 4.0])


if __name__ == "__main__":
    unittest.main()
